//! Acceptance suite. Every criterion prints one line, `PASS`, `FAIL` or
//! `FLAG` (a directional result that is reported but not enforced), and the
//! test asserts on the enforced ones.
//!
//! The desk-scale criteria train the full matrix from `configs/desk.toml`
//! and take about half an hour on one CPU core. With `AASSL_OUT_ROOT` set,
//! run directories go to `$AASSL_OUT_ROOT/acceptance` and cells that already
//! succeeded there are reused; otherwise they live in a temporary directory.

use std::io::Write;
use std::path::PathBuf;

use aassl::actions::{relative_pose_action, wrap_degrees, yaw_action, Pose, Quat};
use aassl::checkpoint::{load_checkpoint, save_checkpoint};
use aassl::dataset::{generate_synthetic, SynthConfig};
use aassl::eval::{embed_dataset, view_alignment_g, EmbeddingSet, FrameLabel, LayerTag};
use aassl::experiment::{run_matrix, CellRecord, CellStatus, ExperimentConfig, MatrixOptions, Report};
use aassl::losses::{
    aa_loss, ciper_loss, cross_entropy, cross_nt_xent, equimod_loss, nt_xent, vicreg, BaseLoss, LossParams, Mat64,
    VicregWeights,
};
use aassl::actions::DatasetStyle;
use aassl::eval::classifier_accuracy;
use aassl::models::{BackboneConfig, HeadConfig};
use aassl::nn::{FeatureMap, Matrix};
use aassl::seed::rng_for;
use aassl::train::{run_training, Method, TrainConfig};
use rand::Rng;

const DESK_CONFIG: &str = include_str!("../../../configs/desk.toml");

fn line(id: &str, status: &str, detail: impl AsRef<str>) {
    let _ = writeln!(std::io::stdout(), "[acceptance {id}] {status}: {}", detail.as_ref());
}

/// Prints the criterion line and returns whether it passed.
fn check(id: &str, ok: bool, detail: impl AsRef<str>) -> bool {
    line(id, if ok { "PASS" } else { "FAIL" }, detail);
    ok
}

fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat64 {
    Mat64::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

// ---------------------------------------------------------------------------
// Brute-force oracles. Plain loops over rows, direct exponentials, no shared
// helpers with the library.

fn cos_rows(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn oracle_nt_xent(a: &Mat64, b: &Mat64, tau: f64) -> f64 {
    let n = a.rows;
    let row = |i: usize| if i < n { a.row(i) } else { b.row(i - n) };
    let mut total = 0.0;
    for i in 0..2 * n {
        let pos = if i < n { i + n } else { i - n };
        let mut denom = 0.0;
        for k in 0..2 * n {
            if k != i {
                denom += (cos_rows(row(i), row(k)) / tau).exp();
            }
        }
        total += -((cos_rows(row(i), row(pos)) / tau).exp() / denom).ln();
    }
    total / (2 * n) as f64
}

fn oracle_cross_nt_xent(a: &Mat64, b: &Mat64, tau: f64) -> f64 {
    let n = a.rows;
    let mut total = 0.0;
    for i in 0..n {
        let mut row_denom = 0.0;
        let mut col_denom = 0.0;
        for j in 0..n {
            row_denom += (cos_rows(a.row(i), b.row(j)) / tau).exp();
            col_denom += (cos_rows(a.row(j), b.row(i)) / tau).exp();
        }
        let pos = (cos_rows(a.row(i), b.row(i)) / tau).exp();
        total += -(pos / row_denom).ln() - (pos / col_denom).ln();
    }
    total / (2 * n) as f64
}

/// `(invariance, variance, covariance)` terms, unweighted.
fn oracle_vicreg_terms(a: &Mat64, b: &Mat64) -> (f64, f64, f64) {
    let (n, p) = (a.rows, a.cols);
    let mut inv = 0.0;
    for r in 0..n {
        for k in 0..p {
            inv += (a.row(r)[k] - b.row(r)[k]).powi(2);
        }
    }
    inv /= (n * p) as f64;
    let mut var = 0.0;
    let mut cov = 0.0;
    for z in [a, b] {
        let mean: Vec<f64> = (0..p).map(|k| (0..n).map(|r| z.row(r)[k]).sum::<f64>() / n as f64).collect();
        for i in 0..p {
            for j in 0..p {
                let mut c = 0.0;
                for r in 0..n {
                    c += (z.row(r)[i] - mean[i]) * (z.row(r)[j] - mean[j]);
                }
                c /= (n - 1) as f64;
                if i == j {
                    var += f64::max(0.0, 1.0 - (c + 1e-4).sqrt()) / p as f64 / 2.0;
                } else {
                    cov += c * c / p as f64;
                }
            }
        }
    }
    (inv, var, cov)
}

fn oracle_vicreg(a: &Mat64, b: &Mat64, w: VicregWeights) -> f64 {
    let (i, v, c) = oracle_vicreg_terms(a, b);
    w.sim * i + w.var * v + w.cov * c
}

fn oracle_invariance(a: &Mat64, b: &Mat64, p: &LossParams) -> f64 {
    match p.base {
        BaseLoss::SimClr => oracle_nt_xent(a, b, p.tau_i),
        BaseLoss::VicReg => oracle_vicreg(a, b, p.vicreg_inv),
    }
}

fn oracle_action(za: &Mat64, zp: &Mat64, p: &LossParams) -> f64 {
    match p.base {
        BaseLoss::SimClr => oracle_cross_nt_xent(za, zp, p.tau_a),
        BaseLoss::VicReg => oracle_vicreg(za, zp, p.vicreg_action),
    }
}

fn oracle_equimod(pred: &Mat64, target: &Mat64, p: &LossParams) -> f64 {
    match p.base {
        BaseLoss::SimClr => oracle_nt_xent(pred, target, p.tau_a),
        BaseLoss::VicReg => oracle_vicreg(pred, target, p.vicreg_action),
    }
}

fn random_params(rng: &mut impl Rng, base: BaseLoss) -> LossParams {
    let mut p = LossParams::for_style(base, DatasetStyle::Yaw);
    p.tau_i = rng.gen_range(0.1..1.0);
    p.tau_a = rng.gen_range(0.1..1.0);
    p.lambda = rng.gen_range(0.0..3.0);
    p.vicreg_inv = VicregWeights { sim: rng.gen_range(0.0..30.0), var: rng.gen_range(0.0..30.0), cov: rng.gen_range(0.0..3.0) };
    p.vicreg_action = VicregWeights { sim: rng.gen_range(0.0..30.0), var: rng.gen_range(0.0..30.0), cov: rng.gen_range(0.0..3.0) };
    p
}

#[test]
fn criterion_1_loss_oracles() {
    let mut worst = [0.0f64; 4];
    for seed in 0..50u64 {
        let mut rng = rng_for(&[seed, 1]);
        let b = rng.gen_range(2..=8);
        let p = rng.gen_range(2..=8);
        let (za, zb, zc, zd) =
            (random_mat(&mut rng, b, p), random_mat(&mut rng, b, p), random_mat(&mut rng, b, p), random_mat(&mut rng, b, p));
        let tau = rng.gen_range(0.1..1.0);
        worst[0] = worst[0].max((nt_xent(&za, &zb, tau).unwrap().value - oracle_nt_xent(&za, &zb, tau)).abs());
        let w = VicregWeights { sim: rng.gen_range(0.0..30.0), var: rng.gen_range(0.0..30.0), cov: rng.gen_range(0.0..3.0) };
        let v = vicreg(&za, &zb, w).unwrap();
        let (oi, ov, oc) = oracle_vicreg_terms(&za, &zb);
        worst[1] = worst[1]
            .max((v.value - oracle_vicreg(&za, &zb, w)).abs())
            .max((v.invariance - oi).abs())
            .max((v.variance - ov).abs())
            .max((v.covariance - oc).abs());
        for base in [BaseLoss::SimClr, BaseLoss::VicReg] {
            let params = random_params(&mut rng, base);
            let t = aa_loss(&za, &zb, &zc, &zd, &params).unwrap();
            let action = oracle_action(&zc, &zd, &params);
            let total = oracle_invariance(&za, &zb, &params) + params.lambda * action;
            worst[2] = worst[2].max((t.action - action).abs()).max((t.total - total).abs());
            let e = equimod_loss(&zc, &zd, &params).unwrap();
            worst[3] = worst[3].max((e.value - oracle_equimod(&zc, &zd, &params)).abs());
        }
    }
    let names = ["nt_xent", "vicreg", "aa_loss action term", "equimod_loss"];
    let mut ok = true;
    for (n, w) in names.iter().zip(worst) {
        ok &= check("1", w < 1e-8, format!("{n} vs brute-force oracle, max |diff| {w:.2e} (< 1e-8)"));
    }
    assert!(ok);
}

#[test]
fn criterion_2_analytic_values() {
    let mut ok = true;
    for b in [2usize, 4, 8] {
        let z = Mat64::new(b, 5, (0..b).flat_map(|_| [0.3, -1.2, 0.7, 2.0, 0.1]).collect());
        let v = nt_xent(&z, &z, 0.1).unwrap().value;
        let expect = ((2 * b - 1) as f64).ln();
        ok &= check("2", (v - expect).abs() < 1e-6, format!("identical NT-Xent B={b}: {v:.9} vs ln(2B-1) {expect:.9}"));
    }
    let mut rng = rng_for(&[2]);
    let a = random_mat(&mut rng, 6, 4);
    let inv = vicreg(&a, &a, VicregWeights { sim: 25.0, var: 25.0, cov: 1.0 }).unwrap().invariance;
    ok &= check("2", inv == 0.0, format!("VICReg invariance for identical branches: {inv}"));
    let (zc, zd) = (random_mat(&mut rng, 6, 4), random_mat(&mut rng, 6, 4));
    let b2 = random_mat(&mut rng, 6, 4);
    for base in [BaseLoss::SimClr, BaseLoss::VicReg] {
        let mut p = LossParams::for_style(base, DatasetStyle::Yaw);
        p.lambda = 0.0;
        let t = aa_loss(&a, &b2, &zc, &zd, &p).unwrap();
        let inv = p.invariance(&a, &b2).unwrap().value;
        ok &= check("2", t.total.to_bits() == inv.to_bits(), format!("aa_loss(λ=0) == invariance term bit-exactly ({base:?})"));
    }
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Finite differences

fn fd_check(x: &Mat64, analytic: &Mat64, f: &dyn Fn(&Mat64) -> f64) -> f64 {
    let h = 1e-6;
    let mut num = Mat64::zeros(x.rows, x.cols);
    for k in 0..x.data.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data[k] += h;
        xm.data[k] -= h;
        num.data[k] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    let diff: f64 = num.data.iter().zip(&analytic.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = num.data.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-6);
    diff / scale
}

#[test]
fn criterion_3_gradient_checks() {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..20u64 {
        let mut rng = rng_for(&[seed, 3]);
        let b = rng.gen_range(3..=8);
        let p = rng.gen_range(2..=6);
        let (a, bb, c, d) =
            (random_mat(&mut rng, b, p), random_mat(&mut rng, b, p), random_mat(&mut rng, b, p), random_mat(&mut rng, b, p));
        let tau = rng.gen_range(0.1..1.0);

        let l = nt_xent(&a, &bb, tau).unwrap();
        record("nt_xent", fd_check(&a, &l.grad_a, &|x| nt_xent(x, &bb, tau).unwrap().value));
        record("nt_xent", fd_check(&bb, &l.grad_b, &|x| nt_xent(&a, x, tau).unwrap().value));

        let l = cross_nt_xent(&a, &bb, tau).unwrap();
        record("cross_nt_xent", fd_check(&a, &l.grad_a, &|x| cross_nt_xent(x, &bb, tau).unwrap().value));
        record("cross_nt_xent", fd_check(&bb, &l.grad_b, &|x| cross_nt_xent(&a, x, tau).unwrap().value));

        let w = VicregWeights { sim: rng.gen_range(0.0..30.0), var: rng.gen_range(0.0..30.0), cov: rng.gen_range(0.0..3.0) };
        let l = vicreg(&a, &bb, w).unwrap();
        record("vicreg", fd_check(&a, &l.grad_a, &|x| vicreg(x, &bb, w).unwrap().value));
        record("vicreg", fd_check(&bb, &l.grad_b, &|x| vicreg(&a, x, w).unwrap().value));

        for base in [BaseLoss::SimClr, BaseLoss::VicReg] {
            let params = random_params(&mut rng, base);
            let t = aa_loss(&a, &bb, &c, &d, &params).unwrap();
            let total = |za: &Mat64, zb: &Mat64, zc: &Mat64, zd: &Mat64| aa_loss(za, zb, zc, zd, &params).unwrap().total;
            record("aa_loss", fd_check(&a, &t.grad_z_t, &|x| total(x, &bb, &c, &d)));
            record("aa_loss", fd_check(&bb, &t.grad_z_t2, &|x| total(&a, x, &c, &d)));
            record("aa_loss", fd_check(&c, &t.grad_action, &|x| total(&a, &bb, x, &d)));
            record("aa_loss", fd_check(&d, &t.grad_pair, &|x| total(&a, &bb, &c, x)));

            let mut attached = params.clone();
            attached.equimod_stop_grad = false;
            let e = equimod_loss(&c, &d, &attached).unwrap();
            record("equimod_loss", fd_check(&c, &e.grad_a, &|x| equimod_loss(x, &d, &attached).unwrap().value));
            record("equimod_loss", fd_check(&d, &e.grad_b, &|x| equimod_loss(&c, x, &attached).unwrap().value));
        }

        let (_, g) = ciper_loss(&a, &bb).unwrap();
        record("ciper_loss", fd_check(&a, &g, &|x| ciper_loss(x, &bb).unwrap().0));

        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..p)).collect();
        let (_, g) = cross_entropy(&a, &labels).unwrap();
        record("cross_entropy", fd_check(&a, &g, &|x| cross_entropy(x, &labels).unwrap().0));
    }
    let mut ok = true;
    for (name, e) in &worst {
        ok &= check("3", *e < 1e-4, format!("{name}: max relative error {e:.2e} over 20 seeds (< 1e-4)"));
    }
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Pose algebra

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                m[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    m
}

fn transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[j][i];
        }
    }
    m
}

/// Rotation from Z-Y-X Euler angles, built from elementary rotations.
fn euler_matrix(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    let (sz, cz) = yaw.sin_cos();
    let (sy, cy) = pitch.sin_cos();
    let (sx, cx) = roll.sin_cos();
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

/// Quaternion → matrix from the textbook formula.
fn quat_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ]
}

/// Matrix → quaternion as the dominant eigenvector of the symmetric 4×4
/// matrix of Bar-Itzhack, found by power iteration on `K + I` (eigenvalues
/// 2 and 2/3 for an exact rotation).
fn oracle_quat(m: &[[f64; 3]; 3]) -> [f64; 4] {
    let (m00, m01, m02) = (m[0][0], m[0][1], m[0][2]);
    let (m10, m11, m12) = (m[1][0], m[1][1], m[1][2]);
    let (m20, m21, m22) = (m[2][0], m[2][1], m[2][2]);
    // Ordered (x, y, z, w).
    let k = [
        [m00 - m11 - m22, m10 + m01, m20 + m02, m21 - m12],
        [m10 + m01, m11 - m00 - m22, m21 + m12, m02 - m20],
        [m20 + m02, m21 + m12, m22 - m00 - m11, m10 - m01],
        [m21 - m12, m02 - m20, m10 - m01, m00 + m11 + m22],
    ];
    let mut v = [0.5, 0.5, 0.5, 0.5];
    let mut best = (0.0, v);
    // Restart from the basis vectors if the first start is near-orthogonal.
    for start in 0..5 {
        if start > 0 {
            v = [0.0; 4];
            v[start - 1] = 1.0;
        }
        for _ in 0..200 {
            let mut next = [0.0; 4];
            for i in 0..4 {
                for j in 0..4 {
                    next[i] += (k[i][j] / 3.0 + if i == j { 1.0 } else { 0.0 }) * v[j];
                }
            }
            let n = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = next.map(|x| x / n);
        }
        let rayleigh: f64 = (0..4).map(|i| (0..4).map(|j| v[i] * k[i][j] * v[j]).sum::<f64>()).sum();
        if rayleigh > best.0 {
            best = (rayleigh, v);
        }
    }
    let v = best.1;
    [v[3], v[0], v[1], v[2]]
}

fn same_up_to_sign(a: [f64; 4], b: [f64; 4]) -> f64 {
    let d_plus: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let d_minus: f64 = a.iter().zip(&b).map(|(x, y)| (x + y).abs()).fold(0.0, f64::max);
    d_plus.min(d_minus)
}

fn random_unit_quat(rng: &mut impl Rng) -> Quat {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return Quat::new(v[0] / n, v[1] / n, v[2] / n, v[3] / n);
        }
    }
}

#[test]
fn criterion_4_pose_algebra() {
    let mut rng = rng_for(&[4]);
    let mut worst_from_matrix = 0.0f64;
    let mut worst_relative = 0.0f64;
    for _ in 0..1000 {
        let m = euler_matrix(rng.gen_range(-3.2..3.2), rng.gen_range(-1.6..1.6), rng.gen_range(-3.2..3.2));
        let q = Quat::from_matrix(&m).as_array();
        worst_from_matrix = worst_from_matrix.max(same_up_to_sign(q, oracle_quat(&m)));

        let (q1, q2) = (random_unit_quat(&mut rng), random_unit_quat(&mut rng));
        let p1 = Pose { rotation: q1, translation: [0.0; 3] };
        let p2 = Pose { rotation: q2, translation: [0.0; 3] };
        let aassl::actions::Action::Pose { rotation, .. } = relative_pose_action(&p1, &p2, 0).unwrap() else {
            panic!("pose action expected");
        };
        let rel = mat_mul(&quat_matrix(q2.as_array()), &transpose(&quat_matrix(q1.as_array())));
        worst_relative = worst_relative.max(same_up_to_sign(rotation.as_array(), oracle_quat(&rel)));
    }
    let mut ok = check(
        "4",
        worst_from_matrix < 1e-9,
        format!("matrix→quaternion vs eigenvector oracle, 1000 rotations: max diff {worst_from_matrix:.2e} (< 1e-9)"),
    );
    ok &= check(
        "4",
        worst_relative < 1e-9,
        format!("relative pose quaternion vs R2·R1ᵀ oracle, 1000 pairs: max diff {worst_relative:.2e} (< 1e-9)"),
    );

    let (mut unit, mut additive) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (y1, y2, y3): (f64, f64, f64) = (rng.gen_range(0.0..360.0), rng.gen_range(0.0..360.0), rng.gen_range(0.0..360.0));
        let flat = |a: aassl::actions::Action| {
            let f = a.flat();
            (f[0], f[1])
        };
        let (s12, c12) = flat(yaw_action(y1, y2));
        let (s23, c23) = flat(yaw_action(y2, y3));
        let (s13, c13) = flat(yaw_action(y1, y3));
        unit = unit.max((s12 * s12 + c12 * c12 - 1.0).abs());
        // Angle addition: a(1,3) = a(1,2) ∘ a(2,3).
        additive = additive.max((s12 * c23 + c12 * s23 - s13).abs()).max((c12 * c23 - s12 * s23 - c13).abs());
        let d = yaw_action(y1, y2).yaw_degrees().unwrap();
        additive = additive.max(wrap_degrees(d - (y2 - y1)).abs());
    }
    ok &= check("4", unit < 1e-12, format!("yaw action on the unit circle, 1000 draws: max |s²+c²−1| {unit:.2e}"));
    ok &= check("4", additive < 1e-9, format!("yaw action additivity, 1000 triples: max error {additive:.2e}"));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// G

fn oracle_g(emb: &EmbeddingSet) -> f64 {
    let cats: std::collections::BTreeSet<usize> = emb.labels.iter().map(|l| l.category).collect();
    let views: std::collections::BTreeSet<u64> = emb.labels.iter().map(|l| l.yaw_deg.to_bits()).collect();
    let row = |r: usize| -> Vec<f64> { emb.embeddings.row(r).iter().map(|&v| v as f64).collect() };
    let find = |inst: usize, yaw: f64| -> usize {
        (0..emb.len()).find(|&r| emb.labels[r].instance == inst && (emb.labels[r].yaw_deg - yaw).abs() < 1e-9).unwrap()
    };
    let mut total = 0.0;
    let mut terms = 0;
    for &c in &cats {
        let objs: std::collections::BTreeSet<usize> =
            emb.labels.iter().filter(|l| l.category == c).map(|l| l.instance).collect();
        for &vb in &views {
            let v = f64::from_bits(vb);
            let mut inner = 0.0;
            for &o in &objs {
                let hv = row(find(o, v));
                let num = cos_rows(&hv, &row(find(o, (v + 90.0) % 360.0)));
                let mut den = 0.0;
                for &o2 in &objs {
                    den += cos_rows(&hv, &row(find(o2, v)));
                }
                inner += num / den;
            }
            total += inner / objs.len() as f64;
            terms += 1;
        }
    }
    total / terms as f64
}

fn embedding_set(sizes: &[usize], views: usize, dim: usize, rng: &mut impl Rng, constant: bool) -> EmbeddingSet {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut instance = 0;
    for (c, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            for f in 0..views {
                labels.push(FrameLabel {
                    category: c,
                    instance,
                    clip: instance,
                    frame_index: f,
                    yaw_deg: f as f64 * 360.0 / views as f64,
                    circular: true,
                });
                // Positive entries keep the denominators away from zero.
                data.extend((0..dim).map(|_| if constant { 1.0 } else { rng.gen_range(0.05f32..1.0) }));
            }
            instance += 1;
        }
    }
    EmbeddingSet::new(Matrix::from_vec(labels.len(), dim, data), labels, LayerTag::Backbone).unwrap()
}

#[test]
fn criterion_5_view_alignment_oracle() {
    let mut rng = rng_for(&[5]);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let sizes: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(2..5)).collect();
        let emb = embedding_set(&sizes, 8, rng.gen_range(2..10), &mut rng, false);
        worst = worst.max((view_alignment_g(&emb, false).unwrap() - oracle_g(&emb)).abs());
    }
    let mut ok = check("5", worst < 1e-9, format!("G vs nested-loop oracle on 20 random sets: max diff {worst:.2e} (< 1e-9)"));
    let g = view_alignment_g(&embedding_set(&[2, 4], 4, 3, &mut rng, true), false).unwrap();
    ok &= check("5", g == 0.375, format!("identical embeddings, category sizes {{2, 4}}: G = {g} (exactly 0.375)"));
    let g = view_alignment_g(&embedding_set(&[4], 4, 3, &mut rng, true), false).unwrap();
    ok &= check("5", g == 0.25, format!("identical embeddings, one category of 4: G = {g} (exactly 0.25)"));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Determinism

fn small_train(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 2,
        batch_size: 8,
        strict: true,
        backbone: BackboneConfig {
            stem_channels: 4,
            stem_patch: 4,
            stage_channels: vec![8, 16],
            residual_blocks: true,
            embed_dim: 16,
        },
        inv_head: HeadConfig { hidden_layers: 1, hidden_width: 16, output_dim: 8 },
        action_head: HeadConfig { hidden_layers: 1, hidden_width: 16, output_dim: 8 },
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_8_determinism() {
    let data = generate_synthetic(&SynthConfig {
        num_categories: 2,
        instances_per_category: 3,
        views_per_object: 8,
        image_size: 32,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut ok = true;
    for method in [Method::AaSimclr, Method::VicregCiper] {
        let a = run_training(&data, &small_train(method), None).unwrap();
        let b = run_training(&data, &small_train(method), None).unwrap();
        let (ca, cb) = (a.metrics.loss_curve(), b.metrics.loss_curve());
        let same = ca.len() == cb.len() && ca.iter().zip(&cb).all(|(x, y)| x.to_bits() == y.to_bits());
        ok &= check("8", same, format!("strict repeat of {method}: {} loss values identical", ca.len()));
    }
    let out = run_training(&data, &small_train(Method::AaVicreg), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&out.bundle, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let e1 = embed_dataset(&out.bundle, &data, LayerTag::Backbone).unwrap();
    let e2 = embed_dataset(&loaded, &data, LayerTag::Backbone).unwrap();
    let x = FeatureMap::new(1, 32, 32, 3, vec![0.5; 32 * 32 * 3]);
    let bit_exact = e1.embeddings == e2.embeddings && out.bundle.encode_frozen(&x).unwrap() == loaded.encode_frozen(&x).unwrap();
    ok &= check("8", bit_exact, format!("checkpoint round trip: {} embeddings bit-identical", e1.len()));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Desk scale

fn desk_dir(name: &str) -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("AASSL_OUT_ROOT") {
        Some(d) => (PathBuf::from(d).join("acceptance").join(name), None),
        None => {
            let t = tempfile::tempdir().unwrap();
            (t.path().join(name), Some(t))
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn metric(report: &Report, key: &str, f: impl Fn(&aassl::experiment::SummaryRow) -> Option<aassl::experiment::Stat>) -> f64 {
    report.variant(key).and_then(f).map_or(f64::NAN, |s| s.mean)
}

/// Observed mean of last-epoch over first-epoch loss for AA-SimCLR on the
/// desk config (3 seeds), pinned with ±20% tolerance.
const AA_LOSS_RATIO: f64 = 0.84;

#[test]
fn criteria_6_7_9_desk_scale() {
    let config = ExperimentConfig::from_toml(DESK_CONFIG).unwrap();
    let (out, _keep) = desk_dir("desk");
    let opts = MatrixOptions { resume: true, strict: None };
    let started = std::time::Instant::now();
    let outcome = run_matrix(&config, &out, &opts).unwrap();
    let r = &outcome.report;
    let mut ok = check("6", outcome.failed() == 0, format!("{} cells trained and evaluated, {} failed", outcome.cells.len(), outcome.failed()));

    let acc = |k: &str| metric(r, k, |s| s.accuracy);
    let random = acc("random");
    for m in &config.methods {
        let a = acc(m.name());
        ok &= check("6a", a >= random + 0.10, format!("{m} probe {a:.4} vs random init {random:.4} (+{:.1} points, need ≥ 10)", 100.0 * (a - random)));
    }
    let (inv_tt, inv_sc) = (metric(r, "simclr_tt", |s| s.invariance), metric(r, "simclr", |s| s.invariance));
    ok &= check("6b", inv_tt > inv_sc, format!("invariance SimCLR-TT {inv_tt:.5} > SimCLR {inv_sc:.5}"));
    let (tr_tt, tr_sc) = (metric(r, "simclr_tt", |s| s.invariance_train), metric(r, "simclr", |s| s.invariance_train));
    line("6b", "INFO", format!("train-split invariance SimCLR-TT {tr_tt:.5} vs SimCLR {tr_sc:.5}"));
    let (aa, tt) = (acc("aa_simclr"), acc("simclr_tt"));
    let gap = 100.0 * (aa - tt);
    line("6c", if aa >= tt { "PASS" } else { "FLAG" }, format!("AA-SimCLR {aa:.4} vs SimCLR-TT {tt:.4}, gap {gap:+.2} points"));
    let drop = |m: &str| acc(m) - acc(&format!("{m}+crop"));
    let (d_tt, d_aa) = (drop("simclr_tt"), drop("aa_simclr"));
    ok &= check("6d", d_tt > d_aa, format!("crop-only drop SimCLR-TT {:.2} points > AA-SimCLR {:.2} points", 100.0 * d_tt, 100.0 * d_aa));
    let (g_aa, g_tt) = (metric(r, "aa_simclr", |s| s.view_alignment), metric(r, "simclr_tt", |s| s.view_alignment));
    ok &= check("6e", g_aa < g_tt, format!("G AA-SimCLR {g_aa:.5} < SimCLR-TT {g_tt:.5}"));

    let trained: Vec<&CellRecord> = outcome.cells.iter().filter(|c| c.method.is_some() && c.status == CellStatus::Ok).collect();
    let learned = trained.iter().all(|c| c.loss_last.unwrap() < c.loss_first.unwrap());
    ok &= check("6", learned, format!("final epoch loss below first epoch loss in all {} trained cells", trained.len()));
    let ratios: Vec<f64> = trained
        .iter()
        .filter(|c| c.variant == "aa_simclr")
        .map(|c| c.loss_last.unwrap() / c.loss_first.unwrap())
        .collect();
    let ratio = mean(&ratios);
    ok &= check(
        "6",
        (ratio - AA_LOSS_RATIO).abs() <= 0.2 * AA_LOSS_RATIO,
        format!("AA-SimCLR last/first epoch loss {ratio:.4} within ±20% of pinned {AA_LOSS_RATIO}"),
    );
    line("6", "INFO", format!("matrix wall time {:.0} s", started.elapsed().as_secs_f64()));

    // λ sweep on the first seed.
    let mut sweep = config.clone();
    sweep.name = "desk_lambda".into();
    sweep.methods = vec![Method::AaSimclr];
    sweep.seeds = vec![config.seeds[0]];
    sweep.eval.random_baseline = false;
    sweep.eval.ablations.clear();
    sweep.eval.lambda_sweep = vec![0.0, 0.1, 1.0, 10.0];
    let (sweep_out, _keep2) = desk_dir("desk_lambda");
    let s = run_matrix(&sweep, &sweep_out, &opts).unwrap();
    let curve: Vec<(f64, f64)> = s.report.lambda.iter().map(|row| (row.lambda, row.accuracy.mean)).collect();
    ok &= check("7", curve.len() == 4 && s.failed() == 0, format!("λ sweep accuracy curve {curve:?}"));
    let best = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let at_one = curve.iter().find(|c| c.0 == 1.0).map_or(f64::NAN, |c| c.1);
    line(
        "7",
        if at_one >= best - 0.02 { "PASS" } else { "FLAG" },
        format!("λ=1 accuracy {at_one:.4} vs sweep maximum {best:.4} (within 2 points)"),
    );

    // Supervised ceiling on the training split.
    let full = config.dataset.load().unwrap();
    let (train, _) = config.dataset.split(&full).unwrap();
    let tc = TrainConfig { method: Method::Supervised, ..config.train.clone() };
    let sup = run_training(&train, &tc, None).unwrap();
    let train_acc = classifier_accuracy(&sup.bundle, &train).unwrap();
    ok &= check("9", train_acc >= 0.90, format!("supervised train-split accuracy {train_acc:.4} (≥ 0.90)"));
    assert!(ok);
}
