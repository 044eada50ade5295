//! Training criteria, evaluated in `f64` with hand-derived gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! each embedding input, so the trainer only has to push those gradients
//! back through the network.

use serde::{Deserialize, Serialize};

use crate::actions::DatasetStyle;
use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Inside the VICReg square root.
pub const VICREG_EPS: f64 = 1e-4;

/// Dense row-major `f64` matrix used at the loss boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat64 shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_f64(self.rows, self.cols, &self.data)
    }

    fn scale(mut self, s: f64) -> Self {
        self.data.iter_mut().for_each(|v| *v *= s);
        self
    }
}

impl From<&Matrix> for Mat64 {
    fn from(m: &Matrix) -> Self {
        Mat64::new(m.rows, m.cols, m.to_f64())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn same_shape(a: &Mat64, b: &Mat64, what: &str) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::Loss(format!(
            "{what}: shapes {}x{} and {}x{} differ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// A loss value and its gradients with respect to two inputs.
#[derive(Clone, Debug)]
pub struct Loss2 {
    pub value: f64,
    pub grad_a: Mat64,
    pub grad_b: Mat64,
}

/// Row-normalizes and returns the unit rows plus the original norms.
fn unit_rows(z: &Mat64, what: &str) -> Result<(Mat64, Vec<f64>)> {
    let mut u = z.clone();
    let mut norms = Vec::with_capacity(z.rows);
    for r in 0..z.rows {
        let n = dot(z.row(r), z.row(r)).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Loss(format!("{what}: row {r} has norm {n}; cosine undefined")));
        }
        u.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((u, norms))
}

/// Gradient through `u = z / |z|` given `du`.
fn unit_rows_backward(u: &Mat64, norms: &[f64], du: &Mat64) -> Mat64 {
    let mut dz = du.clone();
    for r in 0..u.rows {
        let ur = u.row(r);
        let proj = dot(ur, du.row(r));
        for (k, g) in dz.row_mut(r).iter_mut().enumerate() {
            *g = (*g - ur[k] * proj) / norms[r];
        }
    }
    dz
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// NT-Xent over `2B` anchors: row `i` of `a` and row `i` of `b` are
/// positives, every other row of either branch is a negative, self pairs
/// are excluded. Mean over anchors.
pub fn nt_xent(a: &Mat64, b: &Mat64, tau: f64) -> Result<Loss2> {
    same_shape(a, b, "nt_xent")?;
    let bsz = a.rows;
    if bsz < 2 {
        return Err(Error::Loss("nt_xent needs at least 2 pairs".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Loss(format!("temperature must be positive, got {tau}")));
    }
    let n = 2 * bsz;
    let mut z = a.data.clone();
    z.extend_from_slice(&b.data);
    let (u, norms) = unit_rows(&Mat64::new(n, a.cols, z), "nt_xent")?;
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = dot(u.row(i), u.row(j)) / tau;
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    // g[i][j] = dL/ds_ij for the anchor-i term.
    let mut g = vec![0.0; n * n];
    let mut value = 0.0;
    for i in 0..n {
        let pos = (i + bsz) % n;
        let row = &s[i * n..(i + 1) * n];
        let others = (0..n).filter(|&j| j != i).map(|j| row[j]);
        let lse = log_sum_exp(others);
        value += lse - row[pos];
        for j in (0..n).filter(|&j| j != i) {
            g[i * n + j] = (row[j] - lse).exp();
        }
        g[i * n + pos] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    value *= inv_n;
    let mut du = Mat64::zeros(n, a.cols);
    for i in 0..n {
        for j in 0..n {
            let w = (g[i * n + j] + g[j * n + i]) * inv_n / tau;
            if w != 0.0 {
                let c = a.cols;
                for k in 0..c {
                    du.data[i * c + k] += w * u.data[j * c + k];
                }
            }
        }
    }
    let dz = unit_rows_backward(&u, &norms, &du);
    let (ga, gb) = dz.data.split_at(bsz * a.cols);
    Ok(Loss2 {
        value,
        grad_a: Mat64::new(bsz, a.cols, ga.to_vec()),
        grad_b: Mat64::new(bsz, a.cols, gb.to_vec()),
    })
}

/// Two-tower NT-Xent: each row of `a` is contrasted against all rows of
/// `b` and vice versa, so negatives always come from the other tower.
/// Mean over the `2B` anchors; equals `ln B` when all rows coincide.
pub fn cross_nt_xent(a: &Mat64, b: &Mat64, tau: f64) -> Result<Loss2> {
    same_shape(a, b, "cross_nt_xent")?;
    let n = a.rows;
    if n < 2 {
        return Err(Error::Loss("cross_nt_xent needs at least 2 pairs".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Loss(format!("temperature must be positive, got {tau}")));
    }
    let (ua, na) = unit_rows(a, "cross_nt_xent")?;
    let (ub, nb) = unit_rows(b, "cross_nt_xent")?;
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = dot(ua.row(i), ub.row(j)) / tau;
        }
    }
    let mut g = vec![0.0; n * n];
    let mut value = 0.0;
    for i in 0..n {
        let lse = log_sum_exp((0..n).map(|j| s[i * n + j]));
        value += lse - s[i * n + i];
        for j in 0..n {
            g[i * n + j] += (s[i * n + j] - lse).exp();
        }
        g[i * n + i] -= 1.0;
    }
    for j in 0..n {
        let lse = log_sum_exp((0..n).map(|i| s[i * n + j]));
        value += lse - s[j * n + j];
        for i in 0..n {
            g[i * n + j] += (s[i * n + j] - lse).exp();
        }
        g[j * n + j] -= 1.0;
    }
    let scale = 1.0 / (2 * n) as f64;
    value *= scale;
    let mut dua = Mat64::zeros(n, a.cols);
    let mut dub = Mat64::zeros(n, a.cols);
    for i in 0..n {
        for j in 0..n {
            let w = g[i * n + j] * scale / tau;
            for k in 0..a.cols {
                dua.data[i * a.cols + k] += w * ub.data[j * a.cols + k];
                dub.data[j * a.cols + k] += w * ua.data[i * a.cols + k];
            }
        }
    }
    Ok(Loss2 {
        value,
        grad_a: unit_rows_backward(&ua, &na, &dua),
        grad_b: unit_rows_backward(&ub, &nb, &dub),
    })
}

/// Similarity / variance / covariance weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VicregWeights {
    pub sim: f64,
    pub var: f64,
    pub cov: f64,
}

#[derive(Clone, Debug)]
pub struct VicregTerms {
    pub value: f64,
    /// Unweighted components.
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    pub grad_a: Mat64,
    pub grad_b: Mat64,
}

/// VICReg. Invariance is the elementwise MSE; the variance hinge on the
/// unbiased per-dimension std is averaged over dimensions and over the two
/// branches; covariance is the sum of squared off-diagonal entries divided
/// by `P`, summed over the branches.
pub fn vicreg(a: &Mat64, b: &Mat64, w: VicregWeights) -> Result<VicregTerms> {
    same_shape(a, b, "vicreg")?;
    let (n, p) = (a.rows, a.cols);
    if n < 2 {
        return Err(Error::Loss("vicreg needs at least 2 rows (variance undefined)".into()));
    }
    let count = (n * p) as f64;
    let mut invariance = 0.0;
    let mut grad_a = Mat64::zeros(n, p);
    let mut grad_b = Mat64::zeros(n, p);
    for k in 0..n * p {
        let d = a.data[k] - b.data[k];
        invariance += d * d;
        grad_a.data[k] = w.sim * 2.0 * d / count;
        grad_b.data[k] = -w.sim * 2.0 * d / count;
    }
    invariance /= count;

    let mut variance = 0.0;
    let mut covariance = 0.0;
    for (z, grad) in [(a, &mut grad_a), (b, &mut grad_b)] {
        let mut mean = vec![0.0; p];
        for r in 0..n {
            mean.iter_mut().zip(z.row(r)).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut xc = z.clone();
        for r in 0..n {
            xc.row_mut(r).iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
        }
        let denom = (n - 1) as f64;
        let mut cov = vec![0.0; p * p];
        for r in 0..n {
            let row = xc.row(r);
            for i in 0..p {
                for j in 0..p {
                    cov[i * p + j] += row[i] * row[j] / denom;
                }
            }
        }
        // dL/dcov, symmetric; variance enters through the diagonal.
        let mut dcov = vec![0.0; p * p];
        for i in 0..p {
            let std = (cov[i * p + i] + VICREG_EPS).sqrt();
            let hinge = 1.0 - std;
            if hinge > 0.0 {
                variance += hinge / (2.0 * p as f64);
                dcov[i * p + i] += w.var * (-0.5 / std) / (2.0 * p as f64);
            }
            for j in 0..p {
                if i != j {
                    let c = cov[i * p + j];
                    covariance += c * c / p as f64;
                    dcov[i * p + j] += w.cov * 2.0 * c / p as f64;
                }
            }
        }
        // d/dxc of cov = xcᵀxc/(n−1) with symmetric dcov is 2·xc·dcov/(n−1).
        // Centering needs no correction: column sums of xc·dcov are zero.
        for r in 0..n {
            let row = xc.row(r);
            let g = grad.row_mut(r);
            for j in 0..p {
                let mut s = 0.0;
                for i in 0..p {
                    s += row[i] * dcov[i * p + j];
                }
                g[j] += 2.0 * s / denom;
            }
        }
    }
    let value = w.sim * invariance + w.var * variance + w.cov * covariance;
    Ok(VicregTerms {
        value,
        invariance,
        variance,
        covariance,
        grad_a,
        grad_b,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseLoss {
    SimClr,
    VicReg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossParams {
    pub base: BaseLoss,
    pub tau_i: f64,
    pub tau_a: f64,
    pub vicreg_inv: VicregWeights,
    pub vicreg_action: VicregWeights,
    /// Weight of the auxiliary term (action, CIPER or EquiMod).
    pub lambda: f64,
    /// Detach the EquiMod target embedding.
    pub equimod_stop_grad: bool,
}

impl LossParams {
    pub fn for_style(base: BaseLoss, style: DatasetStyle) -> Self {
        let (tau_a, action_weight) = match style {
            DatasetStyle::Yaw => (0.1, 25.0),
            DatasetStyle::Pose => (0.5, 10.0),
        };
        Self {
            base,
            tau_i: 0.1,
            tau_a,
            vicreg_inv: VicregWeights { sim: 25.0, var: 25.0, cov: 1.0 },
            vicreg_action: VicregWeights {
                sim: action_weight,
                var: action_weight,
                cov: 1.0,
            },
            lambda: 1.0,
            equimod_stop_grad: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_i > 0.0 && self.tau_a > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        let ws = [self.vicreg_inv, self.vicreg_action];
        if ws.iter().any(|w| w.sim < 0.0 || w.var < 0.0 || w.cov < 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// The invariance criterion `L` with the invariance hyperparameters.
    pub fn invariance(&self, a: &Mat64, b: &Mat64) -> Result<Loss2> {
        match self.base {
            BaseLoss::SimClr => nt_xent(a, b, self.tau_i),
            BaseLoss::VicReg => vicreg(a, b, self.vicreg_inv).map(Loss2::from),
        }
    }

    /// `L` with the action hyperparameters between the action embedding and
    /// the pair embedding.
    pub fn action(&self, z_action: &Mat64, z_pair: &Mat64) -> Result<Loss2> {
        match self.base {
            BaseLoss::SimClr => cross_nt_xent(z_action, z_pair, self.tau_a),
            BaseLoss::VicReg => vicreg(z_action, z_pair, self.vicreg_action).map(Loss2::from),
        }
    }
}

impl From<VicregTerms> for Loss2 {
    fn from(t: VicregTerms) -> Self {
        Loss2 {
            value: t.value,
            grad_a: t.grad_a,
            grad_b: t.grad_b,
        }
    }
}

/// `total = inv + λ·action`, with gradients for all four embeddings.
#[derive(Clone, Debug)]
pub struct AaTerms {
    pub total: f64,
    pub inv: f64,
    pub action: f64,
    pub grad_z_t: Mat64,
    pub grad_z_t2: Mat64,
    pub grad_action: Mat64,
    pub grad_pair: Mat64,
}

pub fn aa_loss(z_t: &Mat64, z_t2: &Mat64, z_action: &Mat64, z_pair: &Mat64, params: &LossParams) -> Result<AaTerms> {
    let inv = params.invariance(z_t, z_t2)?;
    let act = params.action(z_action, z_pair)?;
    let lambda = params.lambda;
    Ok(AaTerms {
        total: inv.value + lambda * act.value,
        inv: inv.value,
        action: act.value,
        grad_z_t: inv.grad_a,
        grad_z_t2: inv.grad_b,
        grad_action: act.grad_a.scale(lambda),
        grad_pair: act.grad_b.scale(lambda),
    })
}

/// The action term alone, unweighted.
pub fn aa_without_inv(z_action: &Mat64, z_pair: &Mat64, params: &LossParams) -> Result<Loss2> {
    params.action(z_action, z_pair)
}

/// Mean squared error over all entries; gradient with respect to `pred`.
pub fn ciper_loss(pred: &Mat64, target: &Mat64) -> Result<(f64, Mat64)> {
    same_shape(pred, target, "ciper_loss")?;
    let count = pred.data.len() as f64;
    let mut value = 0.0;
    let mut grad = Mat64::zeros(pred.rows, pred.cols);
    for k in 0..pred.data.len() {
        let d = pred.data[k] - target.data[k];
        value += d * d / count;
        grad.data[k] = 2.0 * d / count;
    }
    Ok((value, grad))
}

/// `L` with the action hyperparameters between the predicted and the
/// actual projection of the second view. `grad_b` is zero when the target
/// is detached.
pub fn equimod_loss(pred: &Mat64, target: &Mat64, params: &LossParams) -> Result<Loss2> {
    let mut l = match params.base {
        BaseLoss::SimClr => nt_xent(pred, target, params.tau_a)?,
        BaseLoss::VicReg => vicreg(pred, target, params.vicreg_action)?.into(),
    };
    if params.equimod_stop_grad {
        l.grad_b = Mat64::zeros(target.rows, target.cols);
    }
    Ok(l)
}

/// Mean softmax cross-entropy; gradient with respect to the logits.
pub fn cross_entropy(logits: &Mat64, labels: &[usize]) -> Result<(f64, Mat64)> {
    if labels.len() != logits.rows {
        return Err(Error::Loss("cross_entropy: label count differs from rows".into()));
    }
    let n = logits.rows as f64;
    let mut value = 0.0;
    let mut grad = logits.clone();
    for (r, &y) in labels.iter().enumerate() {
        if y >= logits.cols {
            return Err(Error::Loss(format!("cross_entropy: label {y} out of range")));
        }
        let row = logits.row(r);
        let lse = log_sum_exp(row.iter().copied());
        value += (lse - row[y]) / n;
        let g = grad.row_mut(r);
        for (k, v) in g.iter_mut().enumerate() {
            *v = ((*v - lse).exp() - if k == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((value, grad))
}
