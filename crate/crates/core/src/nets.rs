//! Binary digital nets (Sobol' construction) and the uniform baseline sampler.
//!
//! Coordinate 1 uses the identity generator matrix, so its points are the
//! base-2 radical inverse in natural order. Coordinates 2.. use the Joe–Kuo
//! `new-joe-kuo-6.21201` direction numbers. Point `i` of coordinate `j` is the
//! XOR of the direction numbers selected by the bits of `i`, scaled by 2^-32,
//! so with 2^m points every value is an exact multiple of 2^-m.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sobol::params::JoeKuoD6;

use crate::error::{Error, Result};
use crate::points::Points;

/// Largest `m` accepted by the generator (2^24 points).
pub const MAX_LOG2_POINTS: u32 = 24;

/// Exhaustive net check limits.
pub const VERIFY_MAX_POINTS: usize = 1 << 16;
pub const VERIFY_MAX_DIM: usize = 4;

/// Compositions examined before `quality_parameter` gives up.
const QUALITY_WORK_LIMIT: u64 = 2_000_000;

fn joe_kuo() -> &'static JoeKuoD6 {
    static TABLE: OnceLock<JoeKuoD6> = OnceLock::new();
    TABLE.get_or_init(JoeKuoD6::extended)
}

/// Largest supported dimension `s` (21201).
pub fn max_dimension() -> usize {
    joe_kuo().dim_params.len() + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base: u32,
    pub m: u32,
    pub s: usize,
    pub t: u32,
}

impl NetConfig {
    pub fn new(base: u32, m: u32, s: usize, t: u32) -> Result<Self> {
        let cfg = NetConfig { base, m, s, t };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Base-2 Sobol' net with the smallest provable `t`: the exact quality
    /// parameter when it is cheap to compute, otherwise the trivial `t = m`.
    pub fn sobol(m: u32, s: usize) -> Result<Self> {
        let t = quality_parameter(m, s).unwrap_or(m);
        NetConfig::new(2, m, s, t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base < 2 {
            return Err(Error::invalid(format!("net base must be >= 2, got {}", self.base)));
        }
        if self.s == 0 {
            return Err(Error::invalid("net dimension s must be >= 1"));
        }
        if self.t > self.m {
            return Err(Error::invalid(format!("quality parameter t={} exceeds m={}", self.t, self.m)));
        }
        if (self.base as f64).powi(self.m as i32) > u64::MAX as f64 {
            return Err(Error::invalid("base^m is not representable"));
        }
        Ok(())
    }

    pub fn num_points(&self) -> u64 {
        (self.base as u64).pow(self.m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Net,
    UniformCube,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CubePointSet {
    pub points: Points,
    pub provenance: Provenance,
}

impl CubePointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.point(i)
    }
}

/// Direction numbers `v_0..v_{bits-1}` for coordinate `j` (0-based), MSB-aligned.
fn direction_numbers(j: usize, bits: u32) -> Vec<u32> {
    let bits = bits as usize;
    if j == 0 {
        return (0..bits).map(|k| 1u32 << (31 - k)).collect();
    }
    let dim = &joe_kuo().dim_params[j - 1];
    let deg = dim.m.len();
    let a = dim.a;
    let mut v = vec![0u32; bits];
    for k in 0..bits {
        v[k] = if k < deg {
            dim.m[k] << (31 - k)
        } else {
            let mut x = v[k - deg] ^ (v[k - deg] >> deg);
            for l in 1..deg {
                if (a >> (deg - 1 - l)) & 1 == 1 {
                    x ^= v[k - l];
                }
            }
            x
        };
    }
    v
}

fn check_generator(cfg: &NetConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.base != 2 {
        return Err(Error::UnsupportedBase(cfg.base));
    }
    if cfg.m > MAX_LOG2_POINTS {
        return Err(Error::TooManyPoints { m: cfg.m, max: MAX_LOG2_POINTS });
    }
    let max = max_dimension();
    if cfg.s > max {
        return Err(Error::DimensionTooLarge { requested: cfg.s, max });
    }
    if let Some(actual) = quality_parameter(cfg.m, cfg.s) {
        if actual > cfg.t {
            return Err(Error::QualityNotAttained { requested: cfg.t, actual });
        }
    } else if cfg.t < cfg.m {
        // cannot certify a nontrivial t for this (m, s)
        return Err(Error::QualityNotAttained { requested: cfg.t, actual: cfg.m });
    }
    Ok(())
}

/// The first `2^m` points of the Sobol' sequence in `[0,1)^s`.
pub fn generate_net(cfg: &NetConfig) -> Result<CubePointSet> {
    generate_net_block(cfg, 0)
}

/// Points `block * 2^m .. (block + 1) * 2^m` of the sequence: a digitally
/// shifted copy of the block-0 net, hence a `(t, m, s)`-net as well.
pub fn generate_net_block(cfg: &NetConfig, block: u32) -> Result<CubePointSet> {
    check_generator(cfg)?;
    let n = 1usize << cfg.m;
    let first = (block as u64) << cfg.m;
    if first + n as u64 > 1u64 << 32 {
        return Err(Error::invalid(format!("net block {block} runs past 2^32 points")));
    }
    let first = first as u32;
    let bits = if first == 0 { cfg.m } else { 32 - (first + (n as u32 - 1)).leading_zeros() };
    let s = cfg.s;
    let scale = 1.0 / (1u64 << 32) as f64;
    let mut data = vec![0.0; n * s];
    let mut column = vec![0u32; n];
    for j in 0..s {
        let v = direction_numbers(j, bits.max(1));
        let mut base = 0u32;
        for (k, vk) in v.iter().enumerate() {
            if (first >> k) & 1 == 1 {
                base ^= vk;
            }
        }
        column[0] = base;
        for i in 1..n {
            // clearing the lowest set bit gives an earlier index
            let prev = i & (i - 1);
            column[i] = column[prev] ^ v[i.trailing_zeros() as usize];
        }
        for (i, c) in column.iter().enumerate() {
            data[i * s + j] = *c as f64 * scale;
        }
    }
    Ok(CubePointSet { points: Points::new(s, data)?, provenance: Provenance::Net })
}

/// I.i.d. uniform points; point `i` draws from ChaCha8 stream `i` of `seed`,
/// so any subset can be regenerated independently.
pub fn sample_uniform_cube(n_points: usize, s: usize, seed: u64) -> Result<CubePointSet> {
    if n_points == 0 {
        return Err(Error::invalid("n_points must be >= 1"));
    }
    if s == 0 {
        return Err(Error::invalid("dimension must be >= 1"));
    }
    let mut data = Vec::with_capacity(n_points * s);
    for i in 0..n_points {
        let mut rng = stream_rng(seed, i as u64);
        data.extend((0..s).map(|_| rng.random::<f64>()));
    }
    Ok(CubePointSet { points: Points::new(s, data)?, provenance: Provenance::UniformCube })
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Calls `f` on every composition of `total` into `parts` nonnegative parts.
fn for_each_composition(total: u32, parts: usize, f: &mut dyn FnMut(&[u32]) -> bool) -> bool {
    fn rec(rest: u32, idx: usize, cur: &mut Vec<u32>, f: &mut dyn FnMut(&[u32]) -> bool) -> bool {
        if idx + 1 == cur.len() {
            cur[idx] = rest;
            return f(cur);
        }
        for d in 0..=rest {
            cur[idx] = d;
            if !rec(rest - d, idx + 1, cur, f) {
                return false;
            }
        }
        true
    }
    let mut cur = vec![0u32; parts];
    rec(total, 0, &mut cur, f)
}

fn compositions_count(total: u32, parts: usize) -> u64 {
    // C(total + parts - 1, parts - 1), saturating
    let k = (parts - 1) as u64;
    let nn = total as u64 + k;
    let k = k.min(nn - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (nn - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Exact quality parameter `t` of the first `2^m` points in `s` dimensions,
/// from GF(2) rank conditions on the generator matrices. `None` when the
/// composition count makes the check too expensive.
pub fn quality_parameter(m: u32, s: usize) -> Option<u32> {
    if s == 0 || s > max_dimension() || m > 32 {
        return None;
    }
    let mut work = 0u64;
    for t in 0..=m {
        let k = m - t;
        work = work.saturating_add(compositions_count(k, s));
        if work > QUALITY_WORK_LIMIT {
            return None;
        }
    }
    // rows[j][r] = r-th generator row of coordinate j as a mask over the m columns
    let rows: Vec<Vec<u32>> = (0..s)
        .map(|j| {
            let v = direction_numbers(j, m.max(1));
            (0..m as usize)
                .map(|r| {
                    v.iter()
                        .take(m as usize)
                        .enumerate()
                        .fold(0u32, |acc, (col, vk)| acc | (((vk >> (31 - r)) & 1) << col))
                })
                .collect()
        })
        .collect();
    for t in 0..=m {
        let ok = for_each_composition(m - t, s, &mut |comp| {
            let mut basis = [0u32; 32];
            for (j, &d) in comp.iter().enumerate() {
                for r in 0..d as usize {
                    if !insert_gf2(&mut basis, rows[j][r]) {
                        return false;
                    }
                }
            }
            true
        });
        if ok {
            return Some(t);
        }
    }
    Some(m)
}

/// Inserts into a GF(2) row-echelon basis indexed by leading bit; false if dependent.
fn insert_gf2(basis: &mut [u32; 32], mut row: u32) -> bool {
    while row != 0 {
        let lead = 31 - row.leading_zeros() as usize;
        if basis[lead] == 0 {
            basis[lead] = row;
            return true;
        }
        row ^= basis[lead];
    }
    false
}

/// Exhaustively checks the `(t, m, s)`-net property: every elementary box of
/// volume `base^(t-m)` holds exactly `base^t` points.
pub fn verify_net_property(ps: &CubePointSet, cfg: &NetConfig) -> Result<bool> {
    cfg.validate()?;
    let n = cfg.num_points();
    if n > VERIFY_MAX_POINTS as u64 || cfg.s > VERIFY_MAX_DIM {
        return Err(Error::InstanceTooLarge(format!(
            "{}^{} points in dimension {} (limits: {} points, dimension {})",
            cfg.base, cfg.m, cfg.s, VERIFY_MAX_POINTS, VERIFY_MAX_DIM
        )));
    }
    if ps.dim() != cfg.s {
        return Err(Error::dims(format!("point set has dimension {}, config says {}", ps.dim(), cfg.s)));
    }
    if ps.len() as u64 != n {
        return Ok(false);
    }
    if ps.points.as_slice().iter().any(|v| !(0.0..1.0).contains(v)) {
        return Ok(false);
    }
    let base = cfg.base as u64;
    let per_box = base.pow(cfg.t);
    let boxes = base.pow(cfg.m - cfg.t) as usize;
    let mut counts = vec![0u64; boxes];
    let ok = for_each_composition(cfg.m - cfg.t, cfg.s, &mut |comp| {
        counts.iter_mut().for_each(|c| *c = 0);
        for p in ps.points.iter() {
            let mut idx = 0u64;
            for (x, &d) in p.iter().zip(comp) {
                let cells = base.pow(d);
                let cell = ((x * cells as f64).floor() as u64).min(cells - 1);
                idx = idx * cells + cell;
            }
            counts[idx as usize] += 1;
        }
        counts.iter().all(|&c| c == per_box)
    });
    Ok(ok)
}
