#![allow(dead_code)]

use cltune_core::corpus::MaskedBatch;
use cltune_core::model::{ModelConfig, ParamLayout};

/// Straight-line f64 re-implementation of the encoder forward pass, written
/// with plain loops and independent of the tape.
pub struct OracleForward<'a> {
    pub config: &'a ModelConfig,
    pub layout: ParamLayout,
    pub params: &'a [f64],
}

impl<'a> OracleForward<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a [f64]) -> Self {
        Self {
            config,
            layout: ParamLayout::new(config),
            params,
        }
    }

    fn p(&self, name: &str) -> &[f64] {
        let s = self.layout.slot(name).unwrap_or_else(|| panic!("no slot {name}"));
        &self.params[s.offset..s.offset + s.len()]
    }

    fn linear(&self, x: &[Vec<f64>], w: &str, b: &str) -> Vec<Vec<f64>> {
        let w = self.p(w);
        let b = self.p(b);
        let out_dim = b.len();
        x.iter()
            .map(|row| {
                (0..out_dim)
                    .map(|j| b[j] + row.iter().enumerate().map(|(i, &v)| v * w[i * out_dim + j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn layer_norm(&self, x: &[Vec<f64>], gain: &str, bias: &str) -> Vec<Vec<f64>> {
        let g = self.p(gain);
        let b = self.p(bias);
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + 1e-5).sqrt();
                row.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]).collect()
            })
            .collect()
    }

    /// Hidden states (embedding output plus every block) for one row.
    pub fn hidden_states(&self, ids: &[u32], valid: &[bool]) -> Vec<Vec<Vec<f64>>> {
        let c = self.config;
        let d = c.d_model;
        let l = ids.len();
        let tok = self.p("tok_emb");
        let pos = self.p("pos_emb");
        let x: Vec<Vec<f64>> = (0..l)
            .map(|t| (0..d).map(|j| tok[ids[t] as usize * d + j] + pos[t * d + j]).collect())
            .collect();
        let mut x = self.layer_norm(&x, "emb_ln.gain", "emb_ln.bias");
        let mut states = vec![x.clone()];
        let h = c.n_heads;
        let dh = d / h;
        for i in 0..c.n_layers {
            let q = self.linear(&x, &format!("block{i}.attn.wq"), &format!("block{i}.attn.bq"));
            let k = self.linear(&x, &format!("block{i}.attn.wk"), &format!("block{i}.attn.bk"));
            let v = self.linear(&x, &format!("block{i}.attn.wv"), &format!("block{i}.attn.bv"));
            let mut ctx = vec![vec![0.0; d]; l];
            for head in 0..h {
                let cols = head * dh..(head + 1) * dh;
                for t in 0..l {
                    let scores: Vec<Option<f64>> = (0..l)
                        .map(|s| {
                            valid[s].then(|| {
                                cols.clone().map(|j| q[t][j] * k[s][j]).sum::<f64>() / (dh as f64).sqrt()
                            })
                        })
                        .collect();
                    let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
                    for s in 0..l {
                        if let Some(sc) = scores[s] {
                            let w = (sc - max).exp() / z;
                            for j in cols.clone() {
                                ctx[t][j] += w * v[s][j];
                            }
                        }
                    }
                }
            }
            let attn = self.linear(&ctx, &format!("block{i}.attn.wo"), &format!("block{i}.attn.bo"));
            let res: Vec<Vec<f64>> = x.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
            let x1 = self.layer_norm(&res, &format!("block{i}.ln1.gain"), &format!("block{i}.ln1.bias"));
            let ff = self.linear(&x1, &format!("block{i}.ff.w1"), &format!("block{i}.ff.b1"));
            let ff: Vec<Vec<f64>> = ff
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|&u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh()))
                        .collect()
                })
                .collect();
            let ff = self.linear(&ff, &format!("block{i}.ff.w2"), &format!("block{i}.ff.b2"));
            let res: Vec<Vec<f64>> = x1.iter().zip(&ff).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
            x = self.layer_norm(&res, &format!("block{i}.ln2.gain"), &format!("block{i}.ln2.bias"));
            states.push(x.clone());
        }
        states
    }

    /// Mean masked-LM cross-entropy over the batch.
    pub fn mlm_loss(&self, batch: &MaskedBatch) -> f64 {
        let (l, v) = (batch.seq_len, self.config.vocab_size);
        let w = self.p("head.w");
        let b = self.p("head.b");
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..batch.batch_size {
            let ids = &batch.input_ids[r * l..(r + 1) * l];
            let valid = &batch.attention_mask[r * l..(r + 1) * l];
            let states = self.hidden_states(ids, valid);
            let last = states.last().unwrap();
            for (&pos, &label) in batch.mask_positions[r].iter().zip(&batch.labels[r]) {
                let logits: Vec<f64> = (0..v)
                    .map(|j| b[j] + (0..self.config.d_model).map(|i| last[pos][i] * w[i * v + j]).sum::<f64>())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                total += lse - logits[label as usize];
                count += 1;
            }
        }
        total / count as f64
    }

    /// Mean-pooled final hidden state of one row.
    pub fn pooled_final(&self, ids: &[u32], valid: &[bool]) -> Vec<f64> {
        let states = self.hidden_states(ids, valid);
        let last = states.last().unwrap();
        let n = valid.iter().filter(|&&v| v).count() as f64;
        (0..self.config.d_model)
            .map(|j| last.iter().zip(valid).filter(|(_, &ok)| ok).map(|(r, _)| r[j]).sum::<f64>() / n)
            .collect()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn smoke_config() -> cltune_core::harness::ExperimentConfig {
    cltune_core::harness::ExperimentConfig::parse(include_str!("../../../../configs/smoke.json")).expect("smoke config")
}

pub fn toy_config() -> cltune_core::harness::ExperimentConfig {
    cltune_core::harness::ExperimentConfig::parse(include_str!("../../../../configs/toy.json")).expect("toy config")
}

/// Experiment writing into `dir`, with corpora already generated.
pub fn experiment_in(
    config: cltune_core::harness::ExperimentConfig,
    dir: &std::path::Path,
) -> cltune_core::harness::Experiment {
    let exp = cltune_core::harness::Experiment::new(config).expect("valid config").with_output_dir(dir);
    exp.gen_all_corpora(false).expect("corpora");
    exp
}
