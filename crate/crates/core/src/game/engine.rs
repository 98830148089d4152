use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::ser::{Serialize, Serializer};
use serde::Deserialize;

use super::config::{spec_hash, GameConfig};
use super::losses::{argmax, arthur_loss_var, merlin_loss, morgana_safe_loss, posterior};
use super::mask::{Granularity, MaskSelection, UnitLayout};
use crate::data::{DatasetBundle, Split};
use crate::error::{NcvError, Result};
use crate::nn::{mix_seed, AdamState, Agent, AgentBundle, AgentRole, Mode};
use crate::tensor::{Tape, Tensor, Var};

const EVAL_CHUNK: usize = 512;

/// Verifier output: a data class or the abstention class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Class(usize),
    Reject,
}

impl Decision {
    pub fn from_index(index: usize, num_classes: usize) -> Self {
        if index == num_classes {
            Decision::Reject
        } else {
            Decision::Class(index)
        }
    }

    pub fn is_safe_for(self, y: usize) -> bool {
        matches!(self, Decision::Reject) || self == Decision::Class(y)
    }
}

impl Serialize for Decision {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Decision::Class(k) => s.serialize_u64(*k as u64),
            Decision::Reject => s.serialize_str("reject"),
        }
    }
}

impl<'de> Deserialize<'de> for Decision {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) if s == "reject" => Ok(Decision::Reject),
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|k| Decision::Class(k as usize))
                .ok_or_else(|| serde::de::Error::custom("class must be a non-negative integer")),
            other => Err(serde::de::Error::custom(format!("bad decision {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, Deserialize)]
pub struct CertificateRecord {
    pub sample_id: usize,
    pub prover: AgentRole,
    pub indices: Vec<usize>,
    pub unit_names: Vec<String>,
    pub posterior: Vec<f64>,
    pub decision: Decision,
}

/// Mean losses over the batches of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, Deserialize)]
pub struct EpochStats {
    pub l_merlin: f64,
    pub l_morgana: f64,
    pub l_arthur: f64,
}

/// One row of the training CSV.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub l_merlin: f64,
    pub l_morgana: f64,
    pub l_arthur: f64,
    pub completeness_train: f64,
    pub soundness_train: f64,
}

pub const LOG_HEADER: &str = "epoch,L_M,L_Morgana,L_A,completeness_train,soundness_train";

pub fn write_log_csv<W: Write>(mut w: W, rows: &[LogRow]) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch, r.l_merlin, r.l_morgana, r.l_arthur, r.completeness_train, r.soundness_train
        )?;
    }
    Ok(())
}

/// Per-sample verifier decisions under each prover's mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Decisions {
    pub merlin: Vec<Decision>,
    pub morgana: Vec<Decision>,
}

/// Agents plus everything needed to run the game on one dataset geometry.
#[derive(Clone, Debug)]
pub struct Game {
    pub config: GameConfig,
    pub layout: UnitLayout,
    pub num_classes: usize,
    pub agents: AgentBundle,
}

fn grads_of(tape: &Tape, vars: &[Var], agent: &Agent) -> Vec<Tensor> {
    vars.iter()
        .zip(agent.params.tensors())
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

fn finite(v: f64, epoch: usize, batch: usize, phase: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NcvError::NonFinite { epoch, batch, phase })
    }
}

impl Game {
    pub fn new(config: GameConfig, layout: UnitLayout, num_classes: usize) -> Result<Self> {
        config.validate_for(&layout, num_classes)?;
        let specs = config.agent_specs(&layout, num_classes)?;
        let agents = AgentBundle::new(specs, config.seed)?;
        Ok(Game {
            config,
            layout,
            num_classes,
            agents,
        })
    }

    /// Builds the unit layout from the bundle's geometry and schema.
    pub fn for_bundle(config: GameConfig, bundle: &DatasetBundle) -> Result<Self> {
        let layout = UnitLayout::new(bundle.dims(), config.granularity, bundle.schema.as_ref())?;
        Game::new(config, layout, bundle.num_classes())
    }

    pub fn spec_hash(&self) -> u64 {
        let h = spec_hash(&[
            self.agents.merlin.spec.clone(),
            self.agents.morgana.spec.clone(),
            self.agents.arthur.spec.clone(),
        ]);
        if self.config.standardize_scores {
            h.rotate_left(1) ^ 0x5c0e
        } else {
            h
        }
    }

    /// Prover unit scores, standardized per row when configured.
    fn prover_scores(&self, tape: &mut Tape, role: AgentRole, params: &[Var], x: Var, mode: Mode) -> Result<Var> {
        let s = self.prover(role).spec.forward(tape, params, x, mode)?;
        if !self.config.standardize_scores {
            return Ok(s);
        }
        let d = self.layout.units;
        let ones = tape.constant(Tensor::from_parts(vec![d], vec![1.0; d]));
        let zeros = tape.constant(Tensor::from_parts(vec![d], vec![0.0; d]));
        tape.layer_norm(s, ones, zeros)
    }

    fn prover(&self, role: AgentRole) -> &Agent {
        self.agents.agent(role)
    }

    /// Unit scores `[n × units]` in inference mode.
    pub fn scores(&self, role: AgentRole, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = self.prover(role).params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let s = self.prover_scores(&mut tape, role, &pv, xv, Mode::INFERENCE)?;
        Ok(tape.value(s).clone())
    }

    /// Hard masks and masked inputs for a batch.
    pub fn masked(&self, role: AgentRole, x: &Tensor) -> Result<(Vec<bool>, Tensor)> {
        self.masked_with(role, x, self.config.mask_size)
    }

    fn masked_with(&self, role: AgentRole, x: &Tensor, m: usize) -> Result<(Vec<bool>, Tensor)> {
        let s = self.scores(role, x)?;
        let hard = self.layout.hard_units(&s, m)?;
        let masked = self.layout.apply_hard(x, &hard);
        Ok((hard, masked))
    }

    pub fn arthur_logits(&self, masked: &Tensor) -> Result<Tensor> {
        let a = &self.agents.arthur;
        a.spec.eval(&a.params, masked, Mode::INFERENCE)
    }

    pub fn decide(&self, logits: &Tensor) -> Vec<Decision> {
        let c = self.num_classes + 1;
        logits
            .data()
            .chunks(c)
            .map(|row| Decision::from_index(argmax(&posterior(row)), self.num_classes))
            .collect()
    }

    /// Decisions under Merlin's and Morgana's masks for every sample.
    pub fn decisions(&self, split: &Split) -> Result<Decisions> {
        let mut merlin = Vec::with_capacity(split.len());
        let mut morgana = Vec::with_capacity(split.len());
        let idx: Vec<usize> = (0..split.len()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let x = split.batch(chunk);
            let (_, xm) = self.masked(AgentRole::Merlin, &x)?;
            merlin.extend(self.decide(&self.arthur_logits(&xm)?));
            let (_, xg) = self.masked(AgentRole::Morgana, &x)?;
            morgana.extend(self.decide(&self.arthur_logits(&xg)?));
        }
        Ok(Decisions { merlin, morgana })
    }

    /// Mask size used for training updates in `epoch`. During the warm-up
    /// it shrinks linearly from every unit to `mask_size`.
    pub fn mask_size_at(&self, epoch: usize) -> usize {
        let (m, w) = (self.config.mask_size, self.config.mask_warmup_epochs);
        if epoch >= w {
            return m;
        }
        m + ((self.layout.units - m) * (w - epoch)).div_ceil(w)
    }

    fn check_split(&self, split: &Split) -> Result<()> {
        if split.dims != self.layout.dims || split.num_classes != self.num_classes {
            return Err(NcvError::contract(format!(
                "split geometry {:?}/{} does not match the game {:?}/{}",
                split.dims, split.num_classes, self.layout.dims, self.num_classes
            )));
        }
        Ok(())
    }

    /// Phase 1 for one prover against the current Arthur. Returns the loss
    /// term of the prover's objective before its update.
    pub fn prover_step(
        &mut self,
        role: AgentRole,
        x: &Tensor,
        y: &[usize],
        dropout_seed: u64,
        epoch: usize,
        batch: usize,
    ) -> Result<f64> {
        let m = self.mask_size_at(epoch);
        let l1 = self.config.l1;
        let (loss_value, grads) = {
            let agent = self.agents.agent(role);
            let arthur = &self.agents.arthur;
            let mut tape = Tape::new();
            let pv = agent.params.bind(&mut tape, true);
            let av = arthur.params.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let s = self.prover_scores(&mut tape, role, &pv, xv, Mode::training(dropout_seed))?;
            let hard = self.layout.hard_units(tape.value(s), m)?;
            let masked = tape.straight_through(s, xv, self.layout.unit_of_feature.clone(), &hard)?;
            let logits = arthur.spec.forward(&mut tape, &av, masked, Mode::INFERENCE)?;
            let (game, phase) = match role {
                AgentRole::Merlin => (merlin_loss(&mut tape, logits, y)?, "merlin"),
                _ => {
                    let l = morgana_safe_loss(&mut tape, logits, y)?;
                    (tape.scale(l, -1.0), "morgana")
                }
            };
            let game_value = finite(tape.value(game).item(), epoch, batch, phase)?;
            let total = if l1 > 0.0 {
                let sig = tape.sigmoid(s);
                let mean = tape.mean_all(sig);
                let pen = tape.scale(mean, l1);
                tape.add(game, pen)?
            } else {
                game
            };
            tape.backward(total)?;
            let value = if role == AgentRole::Merlin { game_value } else { -game_value };
            (value, grads_of(&tape, &pv, agent))
        };
        let agent = self.agents.agent_mut(role);
        agent.optim.step(&mut agent.params, &grads)?;
        Ok(loss_value)
    }

    /// Phase 2: verifier step on freshly recomputed masks.
    pub fn arthur_step(&mut self, x: &Tensor, y: &[usize], dropout_seed: u64, epoch: usize, batch: usize) -> Result<EpochStats> {
        let gamma = self.config.gamma;
        let m = self.mask_size_at(epoch);
        let (_, xm) = self.masked_with(AgentRole::Merlin, x, m)?;
        let xg = if self.config.adversary {
            Some(self.masked_with(AgentRole::Morgana, x, m)?.1)
        } else {
            None
        };
        let arthur = &self.agents.arthur;
        let mut tape = Tape::new();
        let av = arthur.params.bind(&mut tape, true);
        let mode = Mode::training(dropout_seed);
        let xm = tape.constant(xm);
        let lm_logits = arthur.spec.forward(&mut tape, &av, xm, mode)?;
        let lm = merlin_loss(&mut tape, lm_logits, y)?;
        let (lg, la) = match xg {
            Some(xg) => {
                let xg = tape.constant(xg);
                let lg_logits = arthur.spec.forward(&mut tape, &av, xg, Mode::training(mix_seed(&[dropout_seed, 1])))?;
                let lg = morgana_safe_loss(&mut tape, lg_logits, y)?;
                (Some(lg), arthur_loss_var(&mut tape, lm, lg, gamma)?)
            }
            None => (None, lm),
        };
        let stats = EpochStats {
            l_merlin: tape.value(lm).item(),
            l_morgana: lg.map_or(0.0, |v| tape.value(v).item()),
            l_arthur: finite(tape.value(la).item(), epoch, batch, "arthur")?,
        };
        tape.backward(la)?;
        let grads = grads_of(&tape, &av, arthur);
        let arthur = &mut self.agents.arthur;
        arthur.optim.step(&mut arthur.params, &grads)?;
        Ok(stats)
    }

    /// `(L_M, L_M̂)` on a batch with every agent in inference mode.
    pub fn losses(&self, x: &Tensor, y: &[usize]) -> Result<(f64, f64)> {
        let mut out = [0.0; 2];
        for (slot, role) in [AgentRole::Merlin, AgentRole::Morgana].into_iter().enumerate() {
            let (_, masked) = self.masked(role, x)?;
            let mut tape = Tape::new();
            let av = self.agents.arthur.params.bind(&mut tape, false);
            let xv = tape.constant(masked);
            let logits = self.agents.arthur.spec.forward(&mut tape, &av, xv, Mode::INFERENCE)?;
            let l = if role == AgentRole::Merlin {
                merlin_loss(&mut tape, logits, y)?
            } else {
                morgana_safe_loss(&mut tape, logits, y)?
            };
            out[slot] = tape.value(l).item();
        }
        Ok((out[0], out[1]))
    }

    /// One pass over `split` in a seed-determined order.
    pub fn train_epoch(&mut self, split: &Split, epoch: usize) -> Result<EpochStats> {
        self.check_split(split)?;
        let mut order: Vec<usize> = (0..split.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, 0x5eed, epoch as u64]));
        order.shuffle(&mut rng);
        let mut sum = EpochStats::default();
        let mut batches = 0usize;
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let x = split.batch(idx);
            let y = split.batch_labels(idx);
            let run_seed = self.config.seed;
            let seed = |role: u64| mix_seed(&[run_seed, epoch as u64, b as u64, role]);
            self.prover_step(AgentRole::Merlin, &x, &y, seed(1), epoch, b)?;
            if self.config.adversary {
                self.prover_step(AgentRole::Morgana, &x, &y, seed(2), epoch, b)?;
            }
            let s = self.arthur_step(&x, &y, seed(3), epoch, b)?;
            self.agents.step += 1;
            sum.l_merlin += s.l_merlin;
            sum.l_morgana += s.l_morgana;
            sum.l_arthur += s.l_arthur;
            batches += 1;
        }
        if batches > 0 {
            let n = batches as f64;
            sum.l_merlin /= n;
            sum.l_morgana /= n;
            sum.l_arthur /= n;
        }
        Ok(sum)
    }

    /// Trains Arthur alone on unmasked inputs with a throwaway optimizer.
    /// Returns the mean cross-entropy of each epoch.
    pub fn pretrain_arthur(&mut self, split: &Split, epochs: usize) -> Result<Vec<f64>> {
        self.check_split(split)?;
        let arthur = &mut self.agents.arthur;
        let mut optim = AdamState::new(arthur.optim.config, &arthur.params);
        let mut order: Vec<usize> = (0..split.len()).collect();
        let mut trace = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, 0x9e7a, epoch as u64]));
            order.shuffle(&mut rng);
            let (mut total, mut batches) = (0.0, 0usize);
            for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
                let mut tape = Tape::new();
                let av = arthur.params.bind(&mut tape, true);
                let x = tape.constant(split.batch(idx));
                let mode = Mode::training(mix_seed(&[self.config.seed, 0x9e7a, epoch as u64, b as u64]));
                let logits = arthur.spec.forward(&mut tape, &av, x, mode)?;
                let loss = merlin_loss(&mut tape, logits, &split.batch_labels(idx))?;
                total += finite(tape.value(loss).item(), epoch, b, "pretrain")?;
                batches += 1;
                tape.backward(loss)?;
                let grads = grads_of(&tape, &av, arthur);
                optim.step(&mut arthur.params, &grads)?;
            }
            trace.push(if batches > 0 { total / batches as f64 } else { 0.0 });
        }
        Ok(trace)
    }

    /// Completeness and soundness over a split; `(0, 0)` when empty.
    pub fn quick_metrics(&self, split: &Split) -> Result<(f64, f64)> {
        if split.is_empty() {
            return Ok((0.0, 0.0));
        }
        let d = self.decisions(split)?;
        let n = split.len() as f64;
        let c = d.merlin.iter().zip(&split.labels).filter(|(d, &y)| **d == Decision::Class(y)).count();
        let s = d.morgana.iter().zip(&split.labels).filter(|(d, &y)| d.is_safe_for(y)).count();
        Ok((c as f64 / n, s as f64 / n))
    }

    /// Runs all configured epochs, logging train-split metrics after each.
    /// Zero epochs leaves the agents at their initialization.
    pub fn train(&mut self, bundle: &DatasetBundle) -> Result<Vec<LogRow>> {
        let mut rows = Vec::with_capacity(self.config.epochs);
        let mut best: Option<(f64, AgentBundle)> = None;
        let mut stale = 0usize;
        if self.config.epochs > 0 {
            self.pretrain_arthur(&bundle.train, self.config.arthur_pretrain_epochs)?;
        }
        for epoch in 0..self.config.epochs {
            let stats = self.train_epoch(&bundle.train, epoch)?;
            let (c, s) = self.quick_metrics(&bundle.train)?;
            rows.push(LogRow {
                epoch: epoch + 1,
                l_merlin: stats.l_merlin,
                l_morgana: stats.l_morgana,
                l_arthur: stats.l_arthur,
                completeness_train: c,
                soundness_train: s,
            });
            if let Some(patience) = self.config.early_stopping {
                let (val_c, _) = self.quick_metrics(&bundle.val)?;
                if best.as_ref().map_or(true, |(b, _)| val_c > *b) {
                    best = Some((val_c, self.agents.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= patience {
                        break;
                    }
                }
            }
        }
        if let Some((_, agents)) = best {
            self.agents = agents;
        }
        Ok(rows)
    }

    /// Certificate for sample `id` of `split` under the given prover.
    pub fn infer(&self, split: &Split, id: usize, prover: AgentRole) -> Result<CertificateRecord> {
        if id >= split.len() {
            return Err(NcvError::Index {
                context: "sample id",
                index: id,
                bound: split.len(),
            });
        }
        if prover == AgentRole::Arthur {
            return Err(NcvError::contract("certificates come from merlin or morgana"));
        }
        let x = split.batch(&[id]);
        let s = self.scores(prover, &x)?;
        let mask = super::mask::topk_mask(s.data(), self.config.mask_size, self.layout.granularity)?;
        let masked = self.layout.apply(&x, &mask)?;
        let logits = self.arthur_logits(&masked)?;
        let post = posterior(logits.data());
        let decision = Decision::from_index(argmax(&post), self.num_classes);
        let row = split.row(id);
        Ok(CertificateRecord {
            sample_id: id,
            prover,
            unit_names: mask.indices.iter().map(|&u| self.layout.describe_unit(u, row)).collect(),
            indices: mask.indices,
            posterior: post,
            decision,
        })
    }

    /// Mask the prover would present for sample `id`.
    pub fn selection(&self, split: &Split, id: usize, prover: AgentRole) -> Result<MaskSelection> {
        let s = self.scores(prover, &split.batch(&[id]))?;
        super::mask::topk_mask(s.data(), self.config.mask_size, self.layout.granularity)
    }

    pub fn granularity(&self) -> Granularity {
        self.layout.granularity
    }
}

/// Writes certificates as JSON lines.
pub fn write_certificates<W: Write>(mut w: W, records: &[CertificateRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
