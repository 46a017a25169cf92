use moeforge::runtime::ffn::{Expert, FfnRouting, FfnWeights, MoeFfn};
use moeforge::runtime::{GateConfig, Matrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracle::{Mat, OracleFfn};

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn to_matrix(m: &Mat) -> Matrix<f64> {
    Matrix::from_rows(m).unwrap()
}

pub fn weights(e: &OracleFfn) -> FfnWeights<f64> {
    FfnWeights::new(to_matrix(&e.gate), to_matrix(&e.up), to_matrix(&e.down)).unwrap()
}

pub struct Instance {
    pub experts: Vec<OracleFfn>,
    pub routers: Option<[Mat; 3]>,
    pub k: usize,
    pub always_on: Option<usize>,
    pub x: Vec<f64>,
}

pub fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let (n, h, f) = (rng.random_range(1..=5), rng.random_range(1..=6), rng.random_range(1..=7));
    let experts = (0..n)
        .map(|_| OracleFfn {
            gate: rand_mat(rng, f, h),
            up: rand_mat(rng, f, h),
            down: rand_mat(rng, h, f),
        })
        .collect();
    let routers = rng
        .random_bool(0.8)
        .then(|| [rand_mat(rng, n, h), rand_mat(rng, n, h), rand_mat(rng, n, h)]);
    let k = rng.random_range(1..=n);
    let always_on = rng.random_bool(0.3).then(|| rng.random_range(0..n));
    let x = (0..h).map(|_| rng.random_range(-2.0..2.0)).collect();
    Instance {
        experts,
        routers,
        k,
        always_on,
        x,
    }
}

pub fn layer(inst: &Instance, fine: bool) -> MoeFfn<f64> {
    let routing = match (&inst.routers, fine) {
        (None, false) => FfnRouting::Ffn(None),
        (Some(r), false) => FfnRouting::Ffn(Some(to_matrix(&r[0]))),
        (None, true) => FfnRouting::Fgmlp(None),
        (Some(r), true) => FfnRouting::Fgmlp(Some([to_matrix(&r[0]), to_matrix(&r[1]), to_matrix(&r[2])])),
    };
    let n = inst.experts.len();
    MoeFfn {
        experts: inst.experts.iter().map(|e| Expert::Full(weights(e))).collect(),
        base: None,
        routing,
        cfg: GateConfig {
            top_k: if inst.routers.is_some() { inst.k } else { n },
            always_on: if inst.routers.is_some() { inst.always_on } else { None },
        },
    }
}


impl Instance {
    /// `(top_k, always_on)` as the gate sees them.
    pub fn gate_params(&self) -> (usize, Option<usize>) {
        match &self.routers {
            Some(_) => (self.k, self.always_on),
            None => (self.experts.len(), None),
        }
    }
}
