//! Network definitions and parameter management: the few-step generator, the
//! online score estimator, the multi-head data-space discriminator, frozen
//! reference copies, and EMA parameter injection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor};

/// Architecture of an x0-prediction denoiser MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetArch {
    /// Data dimension d; input and output width.
    pub data_dim: usize,
    /// Width of each hidden layer.
    pub hidden: usize,
    /// Number of hidden layers.
    pub layers: usize,
    /// Sinusoidal timestep embedding dimension (even).
    pub time_embed: usize,
    /// Number of condition classes; 0 means unconditional.
    pub num_conditions: usize,
    /// Timestep range used to scale the embedding frequencies.
    pub t_max: usize,
}

impl Default for NetArch {
    fn default() -> Self {
        NetArch {
            data_dim: 2,
            hidden: 128,
            layers: 3,
            time_embed: 16,
            num_conditions: 0,
            t_max: 1000,
        }
    }
}

impl NetArch {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("data_dim", self.data_dim),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("time_embed", self.time_embed),
            ("t_max", self.t_max),
        ] {
            if v == 0 {
                return Err(Error::config(format!("net.{name}"), "must be positive"));
            }
        }
        if self.time_embed % 2 != 0 {
            return Err(Error::config("net.time_embed", "must be even"));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of an integer timestep.
pub fn timestep_embedding(t: usize, dim: usize, t_max: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut emb = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(i as f64) * (10_000f64.ln()) / half.max(1) as f64).exp();
        let angle = t as f64 / t_max as f64 * 1000.0 * freq;
        emb[2 * i] = angle.sin();
        emb[2 * i + 1] = angle.cos();
    }
    emb
}

fn one_hot(idx: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[idx] = 1.0;
    v
}

fn tile_rows(row: &[f64], rows: usize) -> Tensor {
    let mut data = Vec::with_capacity(row.len() * rows);
    for _ in 0..rows {
        data.extend_from_slice(row);
    }
    Tensor::new(vec![rows, row.len()], data).expect("tile_rows")
}

/// Small feedforward x0-prediction network. Instantiated as the generator,
/// the score estimator, and frozen reference copies.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub arch: NetArch,
    params: Vec<Tensor>,
    names: Vec<String>,
}

impl DenoiserNet {
    /// Kaiming-style trunk init; final layer zero so the untrained net
    /// predicts exactly zero.
    pub fn init(arch: NetArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::new();
        let mut names = Vec::new();
        let h = arch.hidden;
        let push_linear = |name: &str,
                               fan_in: usize,
                               fan_out: usize,
                               zero: bool,
                               rng: &mut Rng,
                               params: &mut Vec<Tensor>,
                               names: &mut Vec<String>| {
            let w = if zero {
                Tensor::zeros(vec![fan_in, fan_out])
            } else {
                let std = (2.0 / fan_in as f64).sqrt();
                let mut t = rng.standard_normal(&[fan_in, fan_out]);
                for v in t.data_mut() {
                    *v *= std;
                }
                t
            };
            params.push(w);
            names.push(format!("{name}.w"));
            params.push(Tensor::zeros(vec![fan_out]));
            names.push(format!("{name}.b"));
        };
        push_linear("in_x", arch.data_dim, h, false, rng, &mut params, &mut names);
        // the time/condition projections share the first-layer bias slot; keep
        // their own zero bias rows out by storing weights only
        params.push({
            let std = (2.0 / arch.time_embed as f64).sqrt();
            let mut t = rng.standard_normal(&[arch.time_embed, h]);
            for v in t.data_mut() {
                *v *= std;
            }
            t
        });
        names.push("in_t.w".into());
        if arch.num_conditions > 0 {
            let std = (2.0 / arch.num_conditions as f64).sqrt();
            let mut t = rng.standard_normal(&[arch.num_conditions, h]);
            for v in t.data_mut() {
                *v *= std;
            }
            params.push(t);
            names.push("in_c.w".into());
        }
        for l in 1..arch.layers {
            push_linear(&format!("hidden{l}"), h, h, false, rng, &mut params, &mut names);
        }
        push_linear("out", h, arch.data_dim, true, rng, &mut params, &mut names);
        Ok(DenoiserNet {
            arch,
            params,
            names,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape("set_params: count mismatch".into()));
        }
        for (new, old) in params.iter().zip(&self.params) {
            if new.shape() != old.shape() {
                return Err(Error::Shape("set_params: shape mismatch".into()));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Register every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Tensor> {
        self.params.iter().map(|p| tape.leaf(p)).collect()
    }

    /// Forward pass through bound (or constant) parameters.
    ///
    /// `x` is `[B, d]`; all rows share the timestep `t` and the optional
    /// condition id. Differentiable w.r.t. both `x` and the bound parameters.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Tensor],
        x: &Tensor,
        t: usize,
        condition: Option<usize>,
    ) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.arch.data_dim {
            return Err(Error::Shape(format!(
                "denoiser forward: expected [B, {}], got {:?}",
                self.arch.data_dim,
                x.shape()
            )));
        }
        let batch = x.shape()[0];
        let mut it = params.iter();
        let mut next = || it.next().expect("param count");
        let (w_x, b1) = (next(), next());
        let w_t = next();
        let w_c = if self.arch.num_conditions > 0 {
            Some(next())
        } else {
            None
        };

        let temb = tile_rows(
            &timestep_embedding(t, self.arch.time_embed, self.arch.t_max),
            batch,
        );
        let mut h = tape.matmul(x, w_x);
        let ht = tape.matmul(&temb, w_t);
        h = tape.add(&h, &ht);
        if let Some(w_c) = w_c {
            let cond = match condition {
                Some(c) => {
                    if c >= self.arch.num_conditions {
                        return Err(Error::UnknownCondition(c));
                    }
                    tile_rows(&one_hot(c, self.arch.num_conditions), batch)
                }
                None => Tensor::zeros(vec![batch, self.arch.num_conditions]),
            };
            let hc = tape.matmul(&cond, w_c);
            h = tape.add(&h, &hc);
        }
        h = tape.bias_add(&h, b1);
        h = tape.silu(&h);
        for _ in 1..self.arch.layers {
            let (w, b) = (next(), next());
            let z = tape.matmul(&h, w);
            let z = tape.bias_add(&z, b);
            h = tape.silu(&z);
        }
        let (w_out, b_out) = (next(), next());
        let y = tape.matmul(&h, w_out);
        Ok(tape.bias_add(&y, b_out))
    }

    /// Constant-valued forward pass (no tape participation).
    pub fn infer(&self, x: &Tensor, t: usize, condition: Option<usize>) -> Result<Tensor> {
        let mut tape = Tape::disabled();
        self.forward(&mut tape, &self.params, x, t, condition)
    }
}

/// EMA injection: `psi <- lambda * psi + (1 - lambda) * theta`, elementwise.
pub fn ema_inject(psi: &mut [Tensor], theta: &[Tensor], lambda_ema: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda_ema) {
        return Err(Error::InvalidArgument(format!(
            "lambda_ema {lambda_ema} outside [0, 1]"
        )));
    }
    if psi.len() != theta.len() {
        return Err(Error::Shape("ema_inject: param count mismatch".into()));
    }
    for (p, t) in psi.iter_mut().zip(theta) {
        if p.shape() != t.shape() {
            return Err(Error::Shape("ema_inject: shape mismatch".into()));
        }
        let td = t.data();
        for (pv, tv) in p.data_mut().iter_mut().zip(td) {
            *pv = lambda_ema * *pv + (1.0 - lambda_ema) * tv;
        }
    }
    Ok(())
}

/// Deep copy intended to stay outside every optimizer and tape.
pub fn freeze_reference(net: &DenoiserNet) -> DenoiserNet {
    net.clone()
}

/// Architecture of the multi-head data-space discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscArch {
    pub data_dim: usize,
    pub trunk_width: usize,
    /// Number of trunk layers; one logit head reads each trunk depth.
    pub heads: usize,
    /// Trunk is frozen after random init unless set.
    pub trainable_trunk: bool,
}

impl Default for DiscArch {
    fn default() -> Self {
        DiscArch {
            data_dim: 2,
            trunk_width: 64,
            heads: 2,
            trainable_trunk: false,
        }
    }
}

impl DiscArch {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.trunk_width == 0 {
            return Err(Error::config("disc", "zero-width layer"));
        }
        if self.heads < 2 {
            return Err(Error::config("disc.heads", "needs at least 2 heads"));
        }
        Ok(())
    }
}

/// Shared frozen trunk with one trainable logit head per trunk depth.
#[derive(Debug, Clone)]
pub struct DiscriminatorNet {
    pub arch: DiscArch,
    trunk: Vec<Tensor>,
    heads: Vec<Tensor>,
    trunk_names: Vec<String>,
    head_names: Vec<String>,
}

impl DiscriminatorNet {
    pub fn init(arch: DiscArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut trunk = Vec::new();
        let mut trunk_names = Vec::new();
        let mut fan_in = arch.data_dim;
        for l in 0..arch.heads {
            let std = (2.0 / fan_in as f64).sqrt();
            let mut w = rng.standard_normal(&[fan_in, arch.trunk_width]);
            for v in w.data_mut() {
                *v *= std;
            }
            trunk.push(w);
            trunk_names.push(format!("trunk{l}.w"));
            let mut b = rng.standard_normal(&[arch.trunk_width]);
            for v in b.data_mut() {
                *v *= 0.1;
            }
            trunk.push(b);
            trunk_names.push(format!("trunk{l}.b"));
            fan_in = arch.trunk_width;
        }
        let mut heads = Vec::new();
        let mut head_names = Vec::new();
        for hidx in 0..arch.heads {
            heads.push(Tensor::zeros(vec![arch.trunk_width, 1]));
            head_names.push(format!("head{hidx}.w"));
            heads.push(Tensor::zeros(vec![1]));
            head_names.push(format!("head{hidx}.b"));
        }
        Ok(DiscriminatorNet {
            arch,
            trunk,
            heads,
            trunk_names,
            head_names,
        })
    }

    pub fn trunk_params(&self) -> &[Tensor] {
        &self.trunk
    }

    pub fn head_params(&self) -> &[Tensor] {
        &self.heads
    }

    pub fn trunk_params_mut(&mut self) -> &mut [Tensor] {
        &mut self.trunk
    }

    pub fn head_params_mut(&mut self) -> &mut [Tensor] {
        &mut self.heads
    }

    pub fn trunk_names(&self) -> &[String] {
        &self.trunk_names
    }

    pub fn head_names(&self) -> &[String] {
        &self.head_names
    }

    pub fn set_trunk(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.trunk.len() {
            return Err(Error::Shape("set_trunk: count mismatch".into()));
        }
        self.trunk = params;
        Ok(())
    }

    pub fn set_heads(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.heads.len() {
            return Err(Error::Shape("set_heads: count mismatch".into()));
        }
        self.heads = params;
        Ok(())
    }

    pub fn bind_heads(&self, tape: &mut Tape) -> Vec<Tensor> {
        self.heads.iter().map(|p| tape.leaf(p)).collect()
    }

    pub fn bind_trunk(&self, tape: &mut Tape) -> Vec<Tensor> {
        self.trunk.iter().map(|p| tape.leaf(p)).collect()
    }

    /// Per-head logits for data-space input `x` of shape `[B, d]`; one `[B, 1]`
    /// logit tensor per head, head `h` reading the trunk activation at depth
    /// `h + 1`. Differentiable w.r.t. `x`, trunk, and heads.
    pub fn forward(
        &self,
        tape: &mut Tape,
        trunk_params: &[Tensor],
        head_params: &[Tensor],
        x: &Tensor,
    ) -> Result<Vec<Tensor>> {
        if x.shape().len() != 2 || x.shape()[1] != self.arch.data_dim {
            return Err(Error::Shape(format!(
                "discriminator forward: expected [B, {}], got {:?}",
                self.arch.data_dim,
                x.shape()
            )));
        }
        let mut logits = Vec::with_capacity(self.arch.heads);
        let mut h = x.clone();
        for l in 0..self.arch.heads {
            let w = &trunk_params[2 * l];
            let b = &trunk_params[2 * l + 1];
            let z = tape.matmul(&h, w);
            let z = tape.bias_add(&z, b);
            h = tape.relu(&z);
            let hw = &head_params[2 * l];
            let hb = &head_params[2 * l + 1];
            let logit = tape.matmul(&h, hw);
            logits.push(tape.bias_add(&logit, hb));
        }
        Ok(logits)
    }

    /// Constant `[B, H]` logit matrix for evaluation.
    pub fn logits_matrix(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::disabled();
        let logits = self.forward(&mut tape, &self.trunk, &self.heads, x)?;
        let batch = x.shape()[0];
        let heads = logits.len();
        let mut data = vec![0.0; batch * heads];
        for (hidx, l) in logits.iter().enumerate() {
            for b in 0..batch {
                data[b * heads + hidx] = l.data()[b];
            }
        }
        Tensor::new(vec![batch, heads], data)
    }
}
