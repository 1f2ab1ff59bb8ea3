//! Scan-and-goal to waypoints network with a hand-written backward pass.
//!
//! ```text
//! scan (N) -> conv(1->C, k, s2) -> conv(C->C, k, s2) -> flatten (C N/4) --+
//! goal (2) -> dense(2->G) --------------------------------------------------+-> dense(->H1) -> dense(->H2) -> dense(->2k+1)
//! ```
//!
//! Every hidden layer uses leaky-ReLU. The first `2k` outputs are offsets:
//! waypoint `i` is the sum of offsets `0..=i`. The last output is the logit
//! of the safety score.
//!
//! Parameters live in one flat vector; gradients use the same layout (see
//! [`PlannerParams::zeros_like`]).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refpath::Waypoints;

pub const LEAKY_SLOPE: f64 = 0.01;
const MAGIC: &[u8; 4] = b"KPNP";
const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub n_beams: usize,
    /// Number of waypoints.
    pub k: usize,
    pub channels: usize,
    pub kernel: usize,
    pub goal_width: usize,
    pub hidden: [usize; 2],
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            n_beams: 64,
            k: 5,
            channels: 8,
            kernel: 5,
            goal_width: 32,
            hidden: [128, 64],
        }
    }
}

impl Architecture {
    /// Tiny configuration for gradient checks.
    pub fn micro() -> Self {
        Self {
            n_beams: 8,
            k: 2,
            channels: 2,
            kernel: 3,
            goal_width: 4,
            hidden: [6, 5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("architecture: {m}")));
        if self.n_beams < 4 || self.n_beams % 4 != 0 {
            return bad("n_beams must be a positive multiple of 4");
        }
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return bad("kernel must be odd");
        }
        if self.channels == 0 || self.goal_width == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        self.channels * self.n_beams / 4
    }

    pub fn outputs(&self) -> usize {
        2 * self.k + 1
    }

    fn layout(&self) -> Layout {
        let mut off = 0;
        let mut conv = |in_ch: usize, in_len: usize| {
            let c = Conv {
                in_ch,
                out_ch: self.channels,
                kernel: self.kernel,
                in_len,
                w: off,
                b: off + self.channels * in_ch * self.kernel,
            };
            off = c.b + self.channels;
            c
        };
        let conv1 = conv(1, self.n_beams);
        let conv2 = conv(self.channels, self.n_beams / 2);
        let mut dense = |n_in: usize, n_out: usize| {
            let d = Dense {
                n_in,
                n_out,
                w: off,
                b: off + n_in * n_out,
            };
            off = d.b + n_out;
            d
        };
        let goal = dense(2, self.goal_width);
        let h1 = dense(self.features() + self.goal_width, self.hidden[0]);
        let h2 = dense(self.hidden[0], self.hidden[1]);
        let out = dense(self.hidden[1], self.outputs());
        Layout {
            conv1,
            conv2,
            goal,
            h1,
            h2,
            out,
            total: off,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().total
    }
}

/// Stride-2 convolution with `kernel / 2` zero padding.
#[derive(Clone, Copy, Debug)]
struct Conv {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    in_len: usize,
    w: usize,
    b: usize,
}

impl Conv {
    fn out_len(&self) -> usize {
        self.in_len / 2
    }

    fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let (k, pad, ol) = (self.kernel, self.kernel / 2, self.out_len());
        let mut y = vec![0.0; self.out_ch * ol];
        for o in 0..self.out_ch {
            for q in 0..ol {
                let mut acc = p[self.b + o];
                for c in 0..self.in_ch {
                    let wrow = self.w + (o * self.in_ch + c) * k;
                    for t in 0..k {
                        let idx = (2 * q + t) as isize - pad as isize;
                        if idx >= 0 && (idx as usize) < self.in_len {
                            acc += p[wrow + t] * x[c * self.in_len + idx as usize];
                        }
                    }
                }
                y[o * ol + q] = acc;
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, p: &[f64], x: &[f64], gy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let (k, pad, ol) = (self.kernel, self.kernel / 2, self.out_len());
        let mut gx = vec![0.0; self.in_ch * self.in_len];
        for o in 0..self.out_ch {
            for q in 0..ol {
                let d = gy[o * ol + q];
                if d == 0.0 {
                    continue;
                }
                g[self.b + o] += d;
                for c in 0..self.in_ch {
                    let wrow = self.w + (o * self.in_ch + c) * k;
                    for t in 0..k {
                        let idx = (2 * q + t) as isize - pad as isize;
                        if idx >= 0 && (idx as usize) < self.in_len {
                            let xi = c * self.in_len + idx as usize;
                            g[wrow + t] += d * x[xi];
                            gx[xi] += d * p[wrow + t];
                        }
                    }
                }
            }
        }
        gx
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

impl Dense {
    fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| {
                let row = &p[self.w + o * self.n_in..self.w + (o + 1) * self.n_in];
                p[self.b + o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    fn backward(&self, p: &[f64], x: &[f64], gy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.n_in];
        for (o, &d) in gy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g[self.b + o] += d;
            let w0 = self.w + o * self.n_in;
            for i in 0..self.n_in {
                g[w0 + i] += d * x[i];
                gx[i] += d * p[w0 + i];
            }
        }
        gx
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    conv1: Conv,
    conv2: Conv,
    goal: Dense,
    h1: Dense,
    h2: Dense,
    out: Dense,
    total: usize,
}

fn leaky(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect()
}

fn leaky_back(z: &[f64], g: &[f64]) -> Vec<f64> {
    z.iter().zip(g).map(|(&v, &d)| if v > 0.0 { d } else { LEAKY_SLOPE * d }).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Learnable weights, or a gradient buffer with the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannerParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct Cache {
    arch: Architecture,
    scan: Vec<f64>,
    goal: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    zg: Vec<f64>,
    joint: Vec<f64>,
    z3: Vec<f64>,
    a3: Vec<f64>,
    z4: Vec<f64>,
    a4: Vec<f64>,
    pub logit: f64,
}

impl PlannerParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            values: vec![0.0; arch.parameter_count()],
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            values: vec![0.0; self.values.len()],
        }
    }

    /// He initialization (normal, std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (start, len, fan_in) in p.weight_blocks() {
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in &mut p.values[start..start + len] {
                *v = n.sample(&mut rng);
            }
        }
        Ok(p)
    }

    /// `(offset, length, fan_in)` of every weight matrix, in layer order.
    pub fn weight_blocks(&self) -> Vec<(usize, usize, usize)> {
        let l = self.arch.layout();
        let conv = |c: &Conv| (c.w, c.b - c.w, c.in_ch * c.kernel);
        let dense = |d: &Dense| (d.w, d.b - d.w, d.n_in);
        vec![
            conv(&l.conv1),
            conv(&l.conv2),
            dense(&l.goal),
            dense(&l.h1),
            dense(&l.h2),
            dense(&l.out),
        ]
    }

    /// Biases of the output layer: `2k` waypoint deltas, then the safety logit.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let n = self.values.len();
        &mut self.values[n - self.arch.outputs()..]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &PlannerParams, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    /// Runs the network. `scan` is normalized to `[0, 1]`; `goal` is in the
    /// body frame, in meters, and is scaled by `goal_scale` on input.
    pub fn forward(&self, scan: &[f64], goal: &Vector2<f64>, goal_scale: f64) -> Result<(Waypoints, Cache)> {
        let arch = self.arch;
        if scan.len() != arch.n_beams {
            return Err(Error::CacheMismatch(format!(
                "scan has {} beams, network expects {}",
                scan.len(),
                arch.n_beams
            )));
        }
        let l = arch.layout();
        let p = &self.values;
        let z1 = l.conv1.forward(p, scan);
        let a1 = leaky(&z1);
        let z2 = l.conv2.forward(p, &a1);
        let a2 = leaky(&z2);
        let g_in = vec![goal.x * goal_scale, goal.y * goal_scale];
        let zg = l.goal.forward(p, &g_in);
        let mut joint = a2;
        joint.extend(leaky(&zg));
        let z3 = l.h1.forward(p, &joint);
        let a3 = leaky(&z3);
        let z4 = l.h2.forward(p, &a3);
        let a4 = leaky(&z4);
        let out = l.out.forward(p, &a4);
        let mut points = Vec::with_capacity(arch.k);
        let mut acc = Vector2::zeros();
        for i in 0..arch.k {
            acc += Vector2::new(out[2 * i], out[2 * i + 1]);
            points.push(acc);
        }
        let logit = out[2 * arch.k];
        let w = Waypoints {
            points,
            safety_score: sigmoid(logit),
        };
        let cache = Cache {
            arch,
            scan: scan.to_vec(),
            goal: g_in,
            z1,
            a1,
            z2,
            zg,
            joint,
            z3,
            a3,
            z4,
            a4,
            logit,
        };
        Ok((w, cache))
    }

    /// Accumulates into `grads` the gradient of a loss whose derivatives are
    /// `grad_points` w.r.t. the waypoints and `grad_logit` w.r.t. the safety
    /// logit.
    pub fn backward(&self, cache: &Cache, grad_points: &[Vector2<f64>], grad_logit: f64, grads: &mut PlannerParams) -> Result<()> {
        let arch = self.arch;
        if cache.arch != arch || grads.arch != arch || grads.values.len() != self.values.len() {
            return Err(Error::CacheMismatch("architecture differs".into()));
        }
        if grad_points.len() != arch.k || cache.scan.len() != arch.n_beams {
            return Err(Error::CacheMismatch(format!(
                "{} waypoint gradients for k = {}",
                grad_points.len(),
                arch.k
            )));
        }
        let l = arch.layout();
        let p = &self.values;
        let g = &mut grads.values;
        // Waypoint i sums offsets 0..=i, so offset j collects waypoints j..k.
        let mut gout = vec![0.0; arch.outputs()];
        let mut acc = Vector2::zeros();
        for j in (0..arch.k).rev() {
            acc += grad_points[j];
            gout[2 * j] = acc.x;
            gout[2 * j + 1] = acc.y;
        }
        gout[2 * arch.k] = grad_logit;
        let ga4 = l.out.backward(p, &cache.a4, &gout, g);
        let gz4 = leaky_back(&cache.z4, &ga4);
        let ga3 = l.h2.backward(p, &cache.a3, &gz4, g);
        let gz3 = leaky_back(&cache.z3, &ga3);
        let gjoint = l.h1.backward(p, &cache.joint, &gz3, g);
        let nf = arch.features();
        let gzg = leaky_back(&cache.zg, &gjoint[nf..]);
        l.goal.backward(p, &cache.goal, &gzg, g);
        let gz2 = leaky_back(&cache.z2, &gjoint[..nf]);
        let ga1 = l.conv2.backward(p, &cache.a1, &gz2, g);
        let gz1 = leaky_back(&cache.z1, &ga1);
        l.conv1.backward(p, &cache.scan, &gz1, g);
        Ok(())
    }

    /// Binary format: magic `KPNP`, version byte, seven little-endian `u32`
    /// architecture fields (`n_beams k channels kernel goal_width hidden0
    /// hidden1`), a `u64` value count, then the values as little-endian `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[FORMAT_VERSION])?;
        let a = &self.arch;
        for v in [a.n_beams, a.k, a.channels, a.kernel, a.goal_width, a.hidden[0], a.hidden[1]] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |m: String| Error::Format(m);
        let mut head = [0u8; 5];
        r.read_exact(&mut head).map_err(|e| fmt(format!("header: {e}")))?;
        if &head[..4] != MAGIC {
            return Err(fmt("bad magic".into()));
        }
        if head[4] != FORMAT_VERSION {
            return Err(fmt(format!("unsupported version {}", head[4])));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| fmt(format!("shape: {e}")))?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let arch = Architecture {
            n_beams: dims[0],
            k: dims[1],
            channels: dims[2],
            kernel: dims[3],
            goal_width: dims[4],
            hidden: [dims[5], dims[6]],
        };
        arch.validate().map_err(|e| fmt(e.to_string()))?;
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|e| fmt(format!("count: {e}")))?;
        let n = u64::from_le_bytes(b) as usize;
        if n != arch.parameter_count() {
            return Err(fmt(format!("{n} values for an architecture with {}", arch.parameter_count())));
        }
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b).map_err(|e| fmt(format!("values: {e}")))?;
            values.push(f64::from_le_bytes(b));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| fmt(e.to_string()))? != 0 {
            return Err(fmt("trailing bytes".into()));
        }
        Ok(Self { arch, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_give_zero_waypoints() {
        let p = PlannerParams::zeros(Architecture::default()).unwrap();
        let (w, _) = p.forward(&[0.7; 64], &Vector2::new(3.0, 1.0), 0.1).unwrap();
        assert!(w.points.iter().all(|q| *q == Vector2::zeros()));
        assert_eq!(w.safety_score, 0.5);
    }

    #[test]
    fn default_shapes() {
        let a = Architecture::default();
        assert_eq!(a.features(), 128);
        assert_eq!(a.outputs(), 11);
        let p = PlannerParams::init(a, 1).unwrap();
        assert_eq!(p.len(), a.parameter_count());
        let (w, c) = p.forward(&[1.0; 64], &Vector2::new(5.0, 0.0), 0.1).unwrap();
        assert_eq!(w.k(), 5);
        assert_eq!(c.joint.len(), 160);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = PlannerParams::init(Architecture::micro(), 3).unwrap();
        let (_, c) = p.forward(&[0.3; 8], &Vector2::new(1.0, 2.0), 0.1).unwrap();
        let mut g = p.zeros_like();
        p.backward(&c, &[Vector2::zeros(); 2], 0.0, &mut g).unwrap();
        assert!(g.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let p = PlannerParams::init(Architecture::micro(), 3).unwrap();
        let q = PlannerParams::init(Architecture::default(), 3).unwrap();
        let (_, c) = q.forward(&[0.3; 64], &Vector2::new(1.0, 2.0), 0.1).unwrap();
        let mut g = p.zeros_like();
        assert!(matches!(
            p.backward(&c, &[Vector2::zeros(); 2], 1.0, &mut g),
            Err(Error::CacheMismatch(_))
        ));
        assert!(p.forward(&[0.3; 7], &Vector2::zeros(), 0.1).is_err());
    }
}
