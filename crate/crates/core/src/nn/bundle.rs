use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{init_params, mix_seed, AdamConfig, AdamState, NetSpec, ParamSet};
use crate::error::{NcvError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Merlin,
    Morgana,
    Arthur,
}

impl AgentRole {
    pub const ALL: [AgentRole; 3] = [AgentRole::Merlin, AgentRole::Morgana, AgentRole::Arthur];

    pub fn name(self) -> &'static str {
        match self {
            AgentRole::Merlin => "merlin",
            AgentRole::Morgana => "morgana",
            AgentRole::Arthur => "arthur",
        }
    }

    fn stream(self) -> u64 {
        match self {
            AgentRole::Merlin => 1,
            AgentRole::Morgana => 2,
            AgentRole::Arthur => 3,
        }
    }
}

/// One network plus its own optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub spec: NetSpec,
    pub params: ParamSet,
    pub optim: AdamState,
}

impl Agent {
    pub fn new(spec: NetSpec, optim: AdamConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = init_params(&spec, seed);
        let optim = AdamState::new(optim, &params);
        Ok(Agent {
            spec,
            params,
            optim,
        })
    }
}

/// The three game agents. Each owns its parameters; nothing is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentBundle {
    pub merlin: Agent,
    pub morgana: Agent,
    pub arthur: Agent,
    /// Batches processed so far.
    pub step: u64,
}

impl AgentBundle {
    pub fn new(specs: [(NetSpec, AdamConfig); 3], seed: u64) -> Result<Self> {
        let [m, g, a] = specs;
        Ok(AgentBundle {
            merlin: Agent::new(m.0, m.1, mix_seed(&[seed, AgentRole::Merlin.stream()]))?,
            morgana: Agent::new(g.0, g.1, mix_seed(&[seed, AgentRole::Morgana.stream()]))?,
            arthur: Agent::new(a.0, a.1, mix_seed(&[seed, AgentRole::Arthur.stream()]))?,
            step: 0,
        })
    }

    pub fn agent(&self, role: AgentRole) -> &Agent {
        match role {
            AgentRole::Merlin => &self.merlin,
            AgentRole::Morgana => &self.morgana,
            AgentRole::Arthur => &self.arthur,
        }
    }

    pub fn agent_mut(&mut self, role: AgentRole) -> &mut Agent {
        match role {
            AgentRole::Merlin => &mut self.merlin,
            AgentRole::Morgana => &mut self.morgana,
            AgentRole::Arthur => &mut self.arthur,
        }
    }

    /// Flattens parameters and optimizer moments into named tensors.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("bundle.step".to_string(), Tensor::scalar(self.step as f64))];
        for role in AgentRole::ALL {
            let a = self.agent(role);
            let r = role.name();
            for (name, t) in a.params.iter() {
                out.push((format!("{r}.param.{name}"), t.clone()));
            }
            out.push((format!("{r}.adam.step"), Tensor::scalar(a.optim.step as f64)));
            for (i, (name, t)) in a.params.iter().enumerate() {
                let shape = t.shape();
                out.push((
                    format!("{r}.adam.m.{name}"),
                    Tensor::from_parts(shape.to_vec(), a.optim.first[i].clone()),
                ));
                out.push((
                    format!("{r}.adam.v.{name}"),
                    Tensor::from_parts(shape.to_vec(), a.optim.second[i].clone()),
                ));
            }
        }
        out
    }

    /// Restores values into a freshly constructed bundle with matching specs.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let mut map: HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = map
                .remove(&name)
                .ok_or_else(|| NcvError::format(None, format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != shape {
                return Err(NcvError::Dimension {
                    op: "load_checkpoint",
                    lhs: shape.to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            Ok(t)
        };
        self.step = take("bundle.step".into(), &[1])?.item() as u64;
        for role in AgentRole::ALL {
            let r = role.name();
            let agent = self.agent_mut(role);
            let names = agent.params.names().to_vec();
            let shapes: Vec<Vec<usize>> = agent.params.tensors().iter().map(|t| t.shape().to_vec()).collect();
            let mut values = Vec::new();
            for (name, shape) in names.iter().zip(&shapes) {
                values.push(take(format!("{r}.param.{name}"), shape)?);
            }
            agent.params.assign(values)?;
            agent.optim.step = take(format!("{r}.adam.step"), &[1])?.item() as u64;
            for (i, (name, shape)) in names.iter().zip(&shapes).enumerate() {
                agent.optim.first[i] = take(format!("{r}.adam.m.{name}"), shape)?.into_data();
                agent.optim.second[i] = take(format!("{r}.adam.v.{name}"), shape)?.into_data();
            }
        }
        if let Some(extra) = map.keys().next() {
            return Err(NcvError::format(None, format!("unexpected tensor {extra} in checkpoint")));
        }
        Ok(())
    }
}
