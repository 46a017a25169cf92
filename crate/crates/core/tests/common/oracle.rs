//! Straight-line reference implementations, written independently of the library.

use nalgebra::{DMatrix, DVector};

use moeforge::TensorMap;

pub type Mat = Vec<Vec<f64>>;

pub fn matvec(m: &Mat, x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| {
            let mut s = 0.0;
            for j in 0..x.len() {
                s += row[j] * x[j];
            }
            s
        })
        .collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn swiglu(g: &Mat, u: &Mat, d: &Mat, x: &[f64]) -> Vec<f64> {
    let a = matvec(g, x);
    let b = matvec(u, x);
    let mut h = vec![0.0; a.len()];
    for i in 0..a.len() {
        h[i] = silu(a[i]) * b[i];
    }
    matvec(d, &h)
}

/// Whether expert `i` is selected: the always-on expert always is; any other
/// expert is if fewer than its free slots beat it (higher logit, or equal
/// logit at a lower index).
pub fn selected(logits: &[f64], k: usize, always_on: Option<usize>, i: usize) -> bool {
    if always_on == Some(i) {
        return true;
    }
    let slots = k - always_on.is_some() as usize;
    let mut better = 0;
    for j in 0..logits.len() {
        if j == i || Some(j) == always_on {
            continue;
        }
        if logits[j] > logits[i] || (logits[j] == logits[i] && j < i) {
            better += 1;
        }
    }
    better < slots
}

/// Dense weight vector over all experts: zero for unselected ones.
pub fn gate_weights(router: Option<&Mat>, n: usize, k: usize, always_on: Option<usize>, x: &[f64]) -> Vec<f64> {
    let Some(r) = router else {
        return vec![1.0 / n as f64; n];
    };
    let z = matvec(r, x);
    let mut num = vec![0.0; n];
    let mut den = 0.0;
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for i in 0..n {
        if selected(&z, k, always_on, i) {
            num[i] = (z[i] - zmax).exp();
            den += num[i];
        }
    }
    num.iter().map(|v| v / den).collect()
}

pub struct OracleFfn {
    pub gate: Mat,
    pub up: Mat,
    pub down: Mat,
}

pub fn moe_ffn(experts: &[OracleFfn], router: Option<&Mat>, k: usize, always_on: Option<usize>, x: &[f64]) -> Vec<f64> {
    let w = gate_weights(router, experts.len(), k, always_on, x);
    let mut y = vec![0.0; x.len()];
    for (e, wi) in experts.iter().zip(&w) {
        let out = swiglu(&e.gate, &e.up, &e.down, x);
        for j in 0..y.len() {
            y[j] += wi * out[j];
        }
    }
    y
}

pub fn fgmlp(experts: &[OracleFfn], routers: Option<[&Mat; 3]>, k: usize, always_on: Option<usize>, x: &[f64]) -> Vec<f64> {
    let n = experts.len();
    let wg = gate_weights(routers.map(|r| r[0]), n, k, always_on, x);
    let wu = gate_weights(routers.map(|r| r[1]), n, k, always_on, x);
    let wd = gate_weights(routers.map(|r| r[2]), n, k, always_on, x);
    let f = experts[0].gate.len();
    let mut g = vec![0.0; f];
    let mut u = vec![0.0; f];
    for i in 0..n {
        let gi = matvec(&experts[i].gate, x);
        let ui = matvec(&experts[i].up, x);
        for j in 0..f {
            g[j] += wg[i] * gi[j];
            u[j] += wu[i] * ui[j];
        }
    }
    let h: Vec<f64> = (0..f).map(|j| silu(g[j]) * u[j]).collect();
    let mut y = vec![0.0; x.len()];
    for i in 0..n {
        let di = matvec(&experts[i].down, &h);
        for j in 0..y.len() {
            y[j] += wd[i] * di[j];
        }
    }
    y
}

/// `W + scale · B · A`, formed explicitly.
pub fn merged(w: &Mat, a: &Mat, b: &Mat, scale: f64) -> Mat {
    let mut out = w.clone();
    for i in 0..w.len() {
        for j in 0..w[0].len() {
            let mut s = 0.0;
            for r in 0..a.len() {
                s += b[i][r] * a[r][j];
            }
            out[i][j] += scale * s;
        }
    }
    out
}

fn load(map: &TensorMap, name: &str) -> DMatrix<f64> {
    let t = map.get(name).unwrap_or_else(|| panic!("missing {name}"));
    let s = t.shape();
    let (r, c) = if s.len() == 1 { (s[0], 1) } else { (s[0], s[1]) };
    DMatrix::from_row_slice(r, c, &t.to_vec::<f64>())
}

fn rms(x: &DVector<f64>, w: &DMatrix<f64>, eps: f64) -> DVector<f64> {
    let ms = x.norm_squared() / x.len() as f64;
    x.component_mul(&w.column(0)) / (ms + eps).sqrt()
}

fn rotate(v: &mut DVector<f64>, heads: usize, hd: usize, pos: usize) {
    for h in 0..heads {
        for i in 0..hd / 2 {
            let theta = pos as f64 * 10_000f64.powf(-((2 * i) as f64) / hd as f64);
            let (a, b) = (v[h * hd + 2 * i], v[h * hd + 2 * i + 1]);
            v[h * hd + 2 * i] = a * theta.cos() - b * theta.sin();
            v[h * hd + 2 * i + 1] = a * theta.sin() + b * theta.cos();
        }
    }
}

fn attention(map: &TensorMap, prefix: &str, xs: &[DVector<f64>], heads: usize, kv_heads: usize) -> Vec<DVector<f64>> {
    let (wq, wk, wv, wo) = (
        load(map, &format!("{prefix}q.weight")),
        load(map, &format!("{prefix}k.weight")),
        load(map, &format!("{prefix}v.weight")),
        load(map, &format!("{prefix}o.weight")),
    );
    let hd = wq.nrows() / heads;
    let q: Vec<DVector<f64>> = xs
        .iter()
        .enumerate()
        .map(|(t, x)| {
            let mut v = &wq * x;
            rotate(&mut v, heads, hd, t);
            v
        })
        .collect();
    let k: Vec<DVector<f64>> = xs
        .iter()
        .enumerate()
        .map(|(t, x)| {
            let mut v = &wk * x;
            rotate(&mut v, kv_heads, hd, t);
            v
        })
        .collect();
    let v: Vec<DVector<f64>> = xs.iter().map(|x| &wv * x).collect();
    let per_kv = heads / kv_heads;
    (0..xs.len())
        .map(|t| {
            let mut ctx = DVector::zeros(heads * hd);
            for h in 0..heads {
                let g = h / per_kv;
                let qh = q[t].rows(h * hd, hd);
                let s: Vec<f64> = (0..=t)
                    .map(|j| qh.dot(&k[j].rows(g * hd, hd)) / (hd as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..=t {
                    let mut c = ctx.rows_mut(h * hd, hd);
                    c += v[j].rows(g * hd, hd) * (e[j] / z);
                }
            }
            &wo * ctx
        })
        .collect()
}

fn silu_v(v: &DVector<f64>) -> DVector<f64> {
    v.map(silu)
}

fn ffn(map: &TensorMap, prefix: &str, x: &DVector<f64>) -> DVector<f64> {
    let g = load(map, &format!("{prefix}gate.weight"));
    let u = load(map, &format!("{prefix}up.weight"));
    let d = load(map, &format!("{prefix}down.weight"));
    d * silu_v(&(g * x)).component_mul(&(u * x))
}

/// Logits of a dense checkpoint, or of a mixture with full experts,
/// FFN-granularity routing and dense attention. Reads tensors by name.
pub fn reference_logits(map: &TensorMap, tokens: &[u32]) -> DMatrix<f64> {
    let heads: usize = map.meta("arch.num_heads").unwrap().parse().unwrap();
    let eps: f64 = map.meta("arch.norm_eps").unwrap().parse().unwrap();
    let embed = load(map, "embed.weight");
    let hidden = embed.ncols();
    let kv_heads = load(map, "layers.0.attn.k.weight").nrows() / (hidden / heads);
    let layers = (0..).take_while(|l| map.contains(&format!("layers.{l}.attn_norm.weight"))).count();
    let n: usize = map.meta("moe.num_experts").map(|s| s.parse().unwrap()).unwrap_or(0);
    let k: usize = map.meta("moe.top_k").map(|s| s.parse().unwrap()).unwrap_or(n);
    let always_on: Option<usize> = map.meta("moe.always_on").and_then(|s| s.parse().ok());

    let mut xs: Vec<DVector<f64>> = tokens
        .iter()
        .map(|&t| embed.row(t as usize).transpose().into_owned())
        .collect();
    for l in 0..layers {
        let an = load(map, &format!("layers.{l}.attn_norm.weight"));
        let fnorm = load(map, &format!("layers.{l}.ffn_norm.weight"));
        let normed: Vec<DVector<f64>> = xs.iter().map(|x| rms(x, &an, eps)).collect();
        let att = attention(map, &format!("layers.{l}.attn."), &normed, heads, kv_heads);
        for (x, a) in xs.iter_mut().zip(&att) {
            *x += a;
        }
        let router_name = format!("layers.{l}.ffn.router.weight");
        let router: Option<Mat> = map.contains(&router_name).then(|| {
            let r = load(map, &router_name);
            (0..r.nrows()).map(|i| r.row(i).iter().cloned().collect()).collect()
        });
        for x in xs.iter_mut() {
            let xf = rms(x, &fnorm, eps);
            let y = if n == 0 {
                ffn(map, &format!("layers.{l}.ffn."), &xf)
            } else {
                let w = gate_weights(router.as_ref(), n, if router.is_some() { k } else { n }, always_on, xf.as_slice());
                let mut y = DVector::zeros(hidden);
                for (i, wi) in w.iter().enumerate() {
                    if *wi != 0.0 {
                        y += ffn(map, &format!("layers.{l}.ffn.experts.{i}."), &xf) * *wi;
                    }
                }
                y
            };
            *x += y;
        }
    }
    let fnorm = load(map, "final_norm.weight");
    let head = load(map, "lm_head.weight");
    let mut out = DMatrix::zeros(tokens.len(), head.nrows());
    for (t, x) in xs.iter().enumerate() {
        let row = &head * rms(x, &fnorm, eps);
        out.set_row(t, &row.transpose());
    }
    out
}
