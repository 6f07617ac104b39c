use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    loss_simple, loss_simple_grad, loss_vlb_term, vlb_estimate, ModelOutput, NoiseSchedule, DEFAULT_LAMBDA_VLB,
};
use crate::error::{Error, Result};
use crate::skeleton::{ContactAssignment, FkTape, JointTree, Joints, CONTACT_OFFSET, NUM_JOINTS, POSE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_vlb: f64,
    pub lambda_fk: f64,
    pub lambda_va: f64,
    pub lambda_body: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_vlb: DEFAULT_LAMBDA_VLB,
            lambda_fk: 1.0,
            lambda_va: 1.0,
            lambda_body: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_vlb", self.lambda_vlb),
            ("lambda_fk", self.lambda_fk),
            ("lambda_va", self.lambda_va),
            ("lambda_body", self.lambda_body),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_pair(context: &str, x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> Result<()> {
    if x.dim() != x_hat.dim() {
        return Err(Error::shape(context, format!("{:?}", x.dim()), format!("{:?}", x_hat.dim())));
    }
    if x.ncols() != POSE_DIM {
        return Err(Error::shape(context, POSE_DIM, x.ncols()));
    }
    Ok(())
}

/// Velocity and acceleration matching: mean over frame pairs of
/// `|x' - x_hat'|^2` plus mean over frame triples of `|x'' - x_hat''|^2`,
/// with derivatives scaled by `fps`. Returns the value and `d/d x_hat`.
pub fn loss_va_with_grad(x: ArrayView2<f64>, x_hat: ArrayView2<f64>, fps: f64) -> Result<(f64, Array2<f64>)> {
    check_pair("loss_va", x, x_hat)?;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    let d = &x_hat - &x;
    let vel = (&d.slice(ndarray::s![1.., ..]) - &d.slice(ndarray::s![..n - 1, ..])) * fps;
    let nv = (n - 1) as f64;
    let mut value = vel.iter().map(|v| v * v).sum::<f64>() / nv;
    let mut g_vel = vel.mapv(|v| 2.0 * v / nv);
    if n >= 3 {
        let acc = (&vel.slice(ndarray::s![1.., ..]) - &vel.slice(ndarray::s![..n - 2, ..])) * fps;
        let na = (n - 2) as f64;
        value += acc.iter().map(|a| a * a).sum::<f64>() / na;
        for i in 0..n - 2 {
            for c in 0..POSE_DIM {
                let g = 2.0 * acc[[i, c]] / na * fps;
                g_vel[[i + 1, c]] += g;
                g_vel[[i, c]] -= g;
            }
        }
    }
    let mut grad = Array2::zeros(x.dim());
    for i in 0..n - 1 {
        for c in 0..POSE_DIM {
            let g = g_vel[[i, c]] * fps;
            grad[[i + 1, c]] += g;
            grad[[i, c]] -= g;
        }
    }
    Ok((value, grad))
}

pub fn loss_va(x: ArrayView2<f64>, x_hat: ArrayView2<f64>, fps: f64) -> Result<f64> {
    loss_va_with_grad(x, x_hat, fps).map(|(v, _)| v)
}

/// Differentiable forward kinematics over every frame of a sequence.
pub struct FkBatch {
    tapes: Vec<FkTape>,
}

impl FkBatch {
    pub fn new(x: ArrayView2<f64>, tree: &JointTree) -> Self {
        Self {
            tapes: x.rows().into_iter().map(|r| FkTape::new(r, tree)).collect(),
        }
    }

    pub fn positions(&self, frame: usize) -> &Joints {
        &self.tapes[frame].positions
    }

    pub fn len(&self) -> usize {
        self.tapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tapes.is_empty()
    }

    /// Adds `d loss / d x` for per-frame position gradients into `grad`.
    pub fn backward(&self, grad_pos: &[Joints], tree: &JointTree, grad: &mut Array2<f64>) {
        for (i, (tape, gp)) in self.tapes.iter().zip(grad_pos).enumerate() {
            let mut row = grad.row_mut(i);
            tape.backward(gp, tree, row.as_slice_mut().expect("standard layout"));
        }
    }
}

fn fk_with_grad(x_fk: &FkBatch, x_hat_fk: &FkBatch) -> (f64, Vec<Joints>) {
    let n = x_fk.len();
    let norm = (n * NUM_JOINTS) as f64;
    let mut value = 0.0;
    let mut grads = vec![[[0.0; 3]; NUM_JOINTS]; n];
    for (i, g) in grads.iter_mut().enumerate() {
        let (p, q) = (x_fk.positions(i), x_hat_fk.positions(i));
        for j in 0..NUM_JOINTS {
            for k in 0..3 {
                let d = q[j][k] - p[j][k];
                value += d * d;
                g[j][k] = 2.0 * d / norm;
            }
        }
    }
    (value / norm, grads)
}

/// Mean squared joint-position error after forward kinematics, averaged over
/// frames and joints.
pub fn loss_fk_with_grad(x: ArrayView2<f64>, x_hat: ArrayView2<f64>, tree: &JointTree) -> Result<(f64, Array2<f64>)> {
    check_pair("loss_fk", x, x_hat)?;
    let (xf, hf) = (FkBatch::new(x, tree), FkBatch::new(x_hat, tree));
    let (value, gp) = fk_with_grad(&xf, &hf);
    let mut grad = Array2::zeros(x.dim());
    hf.backward(&gp, tree, &mut grad);
    Ok((value, grad))
}

pub fn loss_fk(x: ArrayView2<f64>, x_hat: ArrayView2<f64>, tree: &JointTree) -> Result<f64> {
    loss_fk_with_grad(x, x_hat, tree).map(|(v, _)| v)
}

fn body_with_grad(
    x_hat: ArrayView2<f64>,
    fk: &FkBatch,
    assignment: &ContactAssignment,
) -> (f64, Vec<Joints>, Array2<f64>) {
    let n = fk.len();
    let norm = (n - 1) as f64;
    let mut value = 0.0;
    let mut gp = vec![[[0.0; 3]; NUM_JOINTS]; n];
    let mut g_contact = Array2::zeros(x_hat.dim());
    for i in 0..n - 1 {
        let (a, b) = (fk.positions(i), fk.positions(i + 1));
        for (s, &j) in assignment.joints.iter().enumerate() {
            let c = x_hat[[i, CONTACT_OFFSET + s]];
            let d: [f64; 3] = std::array::from_fn(|k| b[j][k] - a[j][k]);
            let d2 = d.iter().map(|v| v * v).sum::<f64>();
            value += c * c * d2;
            g_contact[[i, CONTACT_OFFSET + s]] += 2.0 * c * d2 / norm;
            for k in 0..3 {
                let g = 2.0 * c * c * d[k] / norm;
                gp[i + 1][j][k] += g;
                gp[i][j][k] -= g;
            }
        }
    }
    (value / norm, gp, g_contact)
}

/// Penalizes movement of body points the model itself predicts to be in
/// contact: mean over frame pairs of `sum_s |(p_{i+1} - p_i)[joint_s] * c_i[s]|^2`
/// with raw predicted contact channels `c`.
pub fn loss_body_with_grad(
    x_hat: ArrayView2<f64>,
    tree: &JointTree,
    assignment: &ContactAssignment,
) -> Result<(f64, Array2<f64>)> {
    check_pair("loss_body", x_hat, x_hat)?;
    if x_hat.nrows() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: x_hat.nrows(),
        });
    }
    let fk = FkBatch::new(x_hat, tree);
    let (value, gp, mut grad) = body_with_grad(x_hat, &fk, assignment);
    fk.backward(&gp, tree, &mut grad);
    Ok((value, grad))
}

pub fn loss_body(x_hat: ArrayView2<f64>, tree: &JointTree, assignment: &ContactAssignment) -> Result<f64> {
    loss_body_with_grad(x_hat, tree, assignment).map(|(v, _)| v)
}

/// Everything the objective needs besides the sample itself.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub schedule: NoiseSchedule,
    pub tree: JointTree,
    pub assignment: ContactAssignment,
    pub weights: LossWeights,
    pub fps: f64,
}

/// Per-component values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub simple: f64,
    /// Raw `L_t` for the drawn timestep.
    pub vlb_term: f64,
    /// Importance-weighted estimate `L_t / (T p_t)`.
    pub vlb: f64,
    pub hybrid: f64,
    pub fk: f64,
    pub va: f64,
    pub body: f64,
    pub total: f64,
}

impl LossReport {
    /// The weighted contributions that make up `total`.
    pub fn contributions(&self, w: &LossWeights) -> [(&'static str, f64); 5] {
        [
            ("simple", self.simple),
            ("vlb", w.lambda_vlb * self.vlb),
            ("fk", w.lambda_fk * self.fk),
            ("va", w.lambda_va * self.va),
            ("body", w.lambda_body * self.body),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub report: LossReport,
    pub grad_x_hat: Array2<f64>,
    /// Zero when `lambda_vlb` is zero.
    pub grad_v: Array2<f64>,
}

/// `L_hybrid + lambda_fk L_fk + lambda_va L_va + lambda_body L_body` with its
/// gradients with respect to the model outputs.
pub fn total_loss(
    ctx: &LossContext,
    x: ArrayView2<f64>,
    z_t: ArrayView2<f64>,
    t: usize,
    p_t: f64,
    out: &ModelOutput,
) -> Result<TotalLoss> {
    total_loss_detached(ctx, x, z_t, t, p_t, out, out.x_hat.view())
}

/// As [`total_loss`], but the VLB term builds its (gradient-free) model mean
/// from `vlb_x_hat`. Finite-difference checks hold it at the unperturbed
/// prediction so both sides see the same function.
pub fn total_loss_detached(
    ctx: &LossContext,
    x: ArrayView2<f64>,
    z_t: ArrayView2<f64>,
    t: usize,
    p_t: f64,
    out: &ModelOutput,
    vlb_x_hat: ArrayView2<f64>,
) -> Result<TotalLoss> {
    ctx.weights.validate()?;
    let x_hat = out.x_hat.view();
    check_pair("total_loss", x, x_hat)?;
    let w = &ctx.weights;
    let steps = ctx.schedule.steps();

    let simple = loss_simple(x, x_hat)?;
    let mut grad_x_hat = loss_simple_grad(x, x_hat);

    let detached = ModelOutput {
        x_hat: vlb_x_hat.to_owned(),
        v: out.v.clone(),
    };
    let term = loss_vlb_term(x, z_t, t, &detached, &ctx.schedule)?;
    let vlb = vlb_estimate(term.value, p_t, steps);
    let grad_v = if w.lambda_vlb == 0.0 {
        Array2::zeros(out.v.dim())
    } else {
        term.grad_v * (w.lambda_vlb / (steps as f64 * p_t))
    };

    let (va, g_va) = loss_va_with_grad(x, x_hat, ctx.fps)?;
    grad_x_hat.scaled_add(w.lambda_va, &g_va);

    let xf = FkBatch::new(x, &ctx.tree);
    let hf = FkBatch::new(x_hat, &ctx.tree);
    let (fk, mut gp) = fk_with_grad(&xf, &hf);
    gp.iter_mut().flatten().flatten().for_each(|g| *g *= w.lambda_fk);
    let (body, gp_body, g_contact) = body_with_grad(x_hat, &hf, &ctx.assignment);
    for (a, b) in gp.iter_mut().zip(&gp_body) {
        for (aj, bj) in a.iter_mut().zip(b) {
            for k in 0..3 {
                aj[k] += w.lambda_body * bj[k];
            }
        }
    }
    grad_x_hat.scaled_add(w.lambda_body, &g_contact);
    hf.backward(&gp, &ctx.tree, &mut grad_x_hat);

    let hybrid = simple + w.lambda_vlb * vlb;
    let total = hybrid + w.lambda_fk * fk + w.lambda_va * va + w.lambda_body * body;
    Ok(TotalLoss {
        report: LossReport {
            simple,
            vlb_term: term.value,
            vlb,
            hybrid,
            fk,
            va,
            body,
            total,
        },
        grad_x_hat,
        grad_v,
    })
}

/// The total loss written as `sum_b w_b |r_b|^2 + extra`, for evaluating
/// differences of nearby losses without cancelling large sums.
#[derive(Debug, Clone)]
pub struct Residuals {
    squares: Vec<(f64, Vec<f64>)>,
    extra: f64,
}

impl Residuals {
    pub fn total(&self) -> f64 {
        self.squares
            .iter()
            .map(|(w, r)| w * r.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            + self.extra
    }

    /// `self.total() - other.total()`, accumulated as `(a - b)(a + b)` per
    /// residual.
    pub fn difference(&self, other: &Residuals) -> f64 {
        let mut d = self.extra - other.extra;
        for ((w, a), (_, b)) in self.squares.iter().zip(&other.squares) {
            d += w * a.iter().zip(b).map(|(a, b)| (a - b) * (a + b)).sum::<f64>();
        }
        d
    }
}

/// Residual form of [`total_loss_detached`].
pub fn loss_residuals(
    ctx: &LossContext,
    x: ArrayView2<f64>,
    z_t: ArrayView2<f64>,
    t: usize,
    p_t: f64,
    out: &ModelOutput,
    vlb_x_hat: ArrayView2<f64>,
) -> Result<Residuals> {
    ctx.weights.validate()?;
    let x_hat = out.x_hat.view();
    check_pair("loss_residuals", x, x_hat)?;
    let w = &ctx.weights;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    let mut squares = Vec::new();
    let d = &x_hat - &x;
    squares.push((1.0 / d.len() as f64, d.iter().copied().collect()));

    let vel = (&d.slice(ndarray::s![1.., ..]) - &d.slice(ndarray::s![..n - 1, ..])) * ctx.fps;
    if n >= 3 {
        let acc = (&vel.slice(ndarray::s![1.., ..]) - &vel.slice(ndarray::s![..n - 2, ..])) * ctx.fps;
        squares.push((w.lambda_va / (n - 2) as f64, acc.iter().copied().collect()));
    }
    squares.push((w.lambda_va / (n - 1) as f64, vel.iter().copied().collect()));

    let xf = FkBatch::new(x, &ctx.tree);
    let hf = FkBatch::new(x_hat, &ctx.tree);
    let mut fk = Vec::with_capacity(n * NUM_JOINTS * 3);
    let mut body = Vec::with_capacity((n - 1) * assignment_len(&ctx.assignment) * 3);
    for i in 0..n {
        let (p, q) = (xf.positions(i), hf.positions(i));
        for j in 0..NUM_JOINTS {
            for k in 0..3 {
                fk.push(q[j][k] - p[j][k]);
            }
        }
        if i + 1 < n {
            let next = hf.positions(i + 1);
            for (s, &j) in ctx.assignment.joints.iter().enumerate() {
                let c = x_hat[[i, CONTACT_OFFSET + s]];
                for k in 0..3 {
                    body.push(c * (next[j][k] - q[j][k]));
                }
            }
        }
    }
    squares.push((w.lambda_fk / (n * NUM_JOINTS) as f64, fk));
    squares.push((w.lambda_body / (n - 1) as f64, body));

    let detached = ModelOutput {
        x_hat: vlb_x_hat.to_owned(),
        v: out.v.clone(),
    };
    let term = loss_vlb_term(x, z_t, t, &detached, &ctx.schedule)?;
    let extra = w.lambda_vlb * vlb_estimate(term.value, p_t, ctx.schedule.steps());
    Ok(Residuals { squares, extra })
}

fn assignment_len(a: &ContactAssignment) -> usize {
    a.joints.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{q_sample, standard_normal, ScheduleKind};
    use crate::skeleton::{axis_angle, matrix_to_rot6d, PoseFrame};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        standard_normal(&mut ChaCha8Rng::seed_from_u64(seed), rows, cols)
    }

    /// Valid poses: small random rotations, translations and contacts.
    fn poses(n: usize, seed: u64) -> Array2<f64> {
        let noise = rand(n, POSE_DIM, seed);
        let mut x = Array2::zeros((n, POSE_DIM));
        for i in 0..n {
            let mut f = PoseFrame::identity([noise[[i, 0]], noise[[i, 1]], noise[[i, 2]]]);
            for j in 0..NUM_JOINTS {
                let axis = [noise[[i, 3 + 3 * j]], noise[[i, 4 + 3 * j]], noise[[i, 5 + 3 * j]]];
                f.joint_rot6d[j] = matrix_to_rot6d(&axis_angle(axis, 0.4 * noise[[i, 80 + j]]));
            }
            for s in 0..9 {
                f.contacts[s] = noise[[i, 120 + s]].abs().min(1.0);
            }
            x.row_mut(i).assign(&ndarray::arr1(&f.flatten()));
        }
        x
    }

    fn ctx() -> LossContext {
        LossContext {
            schedule: NoiseSchedule::new(40, ScheduleKind::Cosine).unwrap(),
            tree: JointTree::smpl(),
            assignment: ContactAssignment::default(),
            weights: LossWeights::default(),
            fps: 30.0,
        }
    }

    fn fd_check(f: &dyn Fn(&Array2<f64>) -> f64, at: &Array2<f64>, grad: &Array2<f64>, samples: usize) {
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..samples {
            let r = rand::Rng::gen_range(&mut rng, 0..at.nrows());
            let c = rand::Rng::gen_range(&mut rng, 0..at.ncols());
            let mut p = at.clone();
            p[[r, c]] += h;
            let up = f(&p);
            p[[r, c]] -= 2.0 * h;
            let down = f(&p);
            let fd = (up - down) / (2.0 * h);
            let an = grad[[r, c]];
            assert!(
                (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-4),
                "({r},{c}) {an} vs {fd}"
            );
        }
    }

    #[test]
    fn va_examples() {
        let x = rand(5, POSE_DIM, 1);
        assert_eq!(loss_va(x.view(), x.view(), 30.0).unwrap(), 0.0);
        let shifted = &x + 0.7;
        assert!(loss_va(x.view(), shifted.view(), 30.0).unwrap().abs() < 1e-18);

        // three frames, error only in channel 4 of the middle frame
        let mut y = x.clone();
        y[[1, 4]] += 0.1;
        let fps: f64 = 10.0;
        // velocities of the error: +1, -1; acceleration: -2 (per frame, times fps)
        let vel = 2.0 * (0.1 * fps).powi(2) / 2.0;
        let acc = (0.2 * fps * fps).powi(2) / 1.0;
        let got = loss_va(x.slice(ndarray::s![..3, ..]), y.slice(ndarray::s![..3, ..]), fps).unwrap();
        assert!((got - (vel + acc)).abs() < 1e-12);
        assert!(loss_va(x.slice(ndarray::s![..1, ..]), x.slice(ndarray::s![..1, ..]), fps).is_err());
    }

    #[test]
    fn va_gradient() {
        let x = rand(6, POSE_DIM, 1);
        let y = rand(6, POSE_DIM, 2);
        let (_, g) = loss_va_with_grad(x.view(), y.view(), 30.0).unwrap();
        fd_check(&|p| loss_va(x.view(), p.view(), 30.0).unwrap(), &y, &g, 40);
    }

    #[test]
    fn fk_examples() {
        let tree = JointTree::smpl();
        let x = poses(4, 1);
        assert_eq!(loss_fk(x.view(), x.view(), &tree).unwrap(), 0.0);
        let mut y = x.clone();
        let d = [0.3, -0.2, 0.5];
        for i in 0..4 {
            for k in 0..3 {
                y[[i, k]] += d[k];
            }
        }
        let want = d.iter().map(|v| v * v).sum::<f64>();
        assert_relative_eq!(loss_fk(x.view(), y.view(), &tree).unwrap(), want, max_relative = 1e-12);

        let z = poses(4, 2);
        let px = crate::skeleton::forward_kinematics_array(x.view(), &tree).unwrap();
        let pz = crate::skeleton::forward_kinematics_array(z.view(), &tree).unwrap();
        let mut brute = 0.0;
        for i in 0..4 {
            for j in 0..NUM_JOINTS {
                for k in 0..3 {
                    brute += (px[i][j][k] - pz[i][j][k]).powi(2);
                }
            }
        }
        assert!((loss_fk(x.view(), z.view(), &tree).unwrap() - brute / 96.0).abs() < 1e-12);
    }

    #[test]
    fn fk_gradient() {
        let tree = JointTree::smpl();
        let x = poses(3, 1);
        let y = &poses(3, 2) + &(0.3 * &rand(3, POSE_DIM, 5));
        let (_, g) = loss_fk_with_grad(x.view(), y.view(), &tree).unwrap();
        fd_check(&|p| loss_fk(x.view(), p.view(), &tree).unwrap(), &y, &g, 60);
    }

    #[test]
    fn body_examples() {
        let tree = JointTree::smpl();
        let a = ContactAssignment::default();
        let mut x = poses(5, 3);
        x.slice_mut(ndarray::s![.., CONTACT_OFFSET..]).fill(0.0);
        assert_eq!(loss_body(x.view(), &tree, &a).unwrap(), 0.0);

        let mut still = Array2::zeros((4, POSE_DIM));
        for i in 0..4 {
            still.row_mut(i).assign(&x.row(0));
        }
        still.slice_mut(ndarray::s![.., CONTACT_OFFSET..]).fill(1.0);
        assert_eq!(loss_body(still.view(), &tree, &a).unwrap(), 0.0);

        // rest pose translating 0.1 m per frame with only the root slot in contact:
        // every joint moves with the root
        let mut moving = Array2::zeros((4, POSE_DIM));
        for i in 0..4 {
            let f = PoseFrame::identity([0.1 * i as f64, 0.0, 0.0]);
            moving.row_mut(i).assign(&ndarray::arr1(&f.flatten()));
            moving[[i, CONTACT_OFFSET + 8]] = 1.0;
        }
        assert_relative_eq!(loss_body(moving.view(), &tree, &a).unwrap(), 0.01, max_relative = 1e-12);
        // contacts on every slot: nine moving points
        moving.slice_mut(ndarray::s![.., CONTACT_OFFSET..]).fill(1.0);
        assert_relative_eq!(loss_body(moving.view(), &tree, &a).unwrap(), 0.09, max_relative = 1e-12);
    }

    #[test]
    fn body_gradient() {
        let tree = JointTree::smpl();
        let a = ContactAssignment::default();
        let y = &poses(4, 2) + &(0.2 * &rand(4, POSE_DIM, 7));
        let (_, g) = loss_body_with_grad(y.view(), &tree, &a).unwrap();
        fd_check(&|p| loss_body(p.view(), &tree, &a).unwrap(), &y, &g, 60);
        // contact channels receive gradient directly
        for s in 0..9 {
            let h = 1e-6;
            let mut p = y.clone();
            p[[1, CONTACT_OFFSET + s]] += h;
            let up = loss_body(p.view(), &tree, &a).unwrap();
            p[[1, CONTACT_OFFSET + s]] -= 2.0 * h;
            let down = loss_body(p.view(), &tree, &a).unwrap();
            assert_relative_eq!((up - down) / (2.0 * h), g[[1, CONTACT_OFFSET + s]], max_relative = 1e-5);
        }
    }

    fn sample(n: usize) -> (Array2<f64>, Array2<f64>, ModelOutput) {
        let c = ctx();
        let x = poses(n, 1);
        let z = q_sample(&c.schedule, x.view(), 9, rand(n, POSE_DIM, 2).view()).unwrap();
        let x_hat = &x + &(0.2 * &rand(n, POSE_DIM, 3));
        let v = rand(n, POSE_DIM, 4).mapv(|a| 0.5 + 0.3 * a.tanh());
        (x, z, ModelOutput::new(x_hat, v).unwrap())
    }

    #[test]
    fn total_loss_components() {
        let (x, z, out) = sample(5);
        let mut c = ctx();
        let full = total_loss(&c, x.view(), z.view(), 9, 0.05, &out).unwrap();
        let r = full.report;
        let sum: f64 = r.contributions(&c.weights).iter().map(|(_, v)| v).sum();
        assert!((sum - r.total).abs() < 1e-12);
        assert!((r.hybrid - (r.simple + c.weights.lambda_vlb * r.vlb)).abs() < 1e-15);
        assert_relative_eq!(r.vlb, r.vlb_term / (40.0 * 0.05), max_relative = 1e-15);

        c.weights = LossWeights {
            lambda_vlb: 0.001,
            lambda_fk: 0.0,
            lambda_va: 0.0,
            lambda_body: 0.0,
        };
        let bare = total_loss(&c, x.view(), z.view(), 9, 0.05, &out).unwrap().report;
        assert_eq!(bare.total, bare.hybrid);

        let mut doubled = ctx();
        doubled.weights.lambda_fk *= 2.0;
        let d = total_loss(&doubled, x.view(), z.view(), 9, 0.05, &out).unwrap().report;
        let base = ctx().weights.lambda_fk * r.fk;
        assert_eq!(d.contributions(&doubled.weights)[2].1, 2.0 * base);

        let mut bad = ctx();
        bad.weights.lambda_body = -1.0;
        assert!(total_loss(&bad, x.view(), z.view(), 9, 0.05, &out).is_err());
    }

    #[test]
    fn zero_lambda_vlb_gives_zero_v_gradient() {
        let (x, z, out) = sample(4);
        let mut c = ctx();
        c.weights.lambda_vlb = 0.0;
        let l = total_loss(&c, x.view(), z.view(), 9, 0.05, &out).unwrap();
        assert!(l.grad_v.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_gradient_matches_fd() {
        let (x, z, out) = sample(4);
        let c = ctx();
        let l = total_loss(&c, x.view(), z.view(), 9, 0.05, &out).unwrap();
        let v = out.v.clone();
        let base_x_hat = out.x_hat.clone();
        fd_check(
            &|p| {
                let o = ModelOutput::new(p.clone(), v.clone()).unwrap();
                total_loss_detached(&c, x.view(), z.view(), 9, 0.05, &o, base_x_hat.view())
                    .unwrap()
                    .report
                    .total
            },
            &out.x_hat,
            &l.grad_x_hat,
            80,
        );
        // v only reaches the VLB term; the kinematic terms would drown its
        // finite differences in rounding
        let mut cv = ctx();
        cv.weights = LossWeights {
            lambda_vlb: 0.001,
            lambda_fk: 0.0,
            lambda_va: 0.0,
            lambda_body: 0.0,
        };
        let lv = total_loss(&cv, x.view(), z.view(), 9, 0.05, &out).unwrap();
        assert_eq!(lv.grad_v, l.grad_v);
        fd_check(
            &|p| {
                let o = ModelOutput::new(base_x_hat.clone(), p.clone()).unwrap();
                total_loss(&cv, x.view(), z.view(), 9, 0.05, &o).unwrap().report.total
            },
            &out.v,
            &l.grad_v,
            40,
        );
    }

    #[test]
    fn residual_form_matches_total() {
        let (x, z, out) = sample(5);
        let c = ctx();
        let total = total_loss(&c, x.view(), z.view(), 9, 0.05, &out).unwrap().report.total;
        let r = loss_residuals(&c, x.view(), z.view(), 9, 0.05, &out, out.x_hat.view()).unwrap();
        assert_relative_eq!(r.total(), total, max_relative = 1e-12);
        let mut other = out.clone();
        other.x_hat[[2, 40]] += 1e-3;
        let r2 = loss_residuals(&c, x.view(), z.view(), 9, 0.05, &other, out.x_hat.view()).unwrap();
        assert_relative_eq!(r2.difference(&r), r2.total() - r.total(), max_relative = 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn losses_nonnegative_and_zero_on_identity(seed in 0u64..1000) {
            let tree = JointTree::smpl();
            let a = ContactAssignment::default();
            let x = poses(4, seed);
            let y = poses(4, seed + 1);
            prop_assert!(loss_va(x.view(), y.view(), 30.0).unwrap() >= 0.0);
            prop_assert!(loss_fk(x.view(), y.view(), &tree).unwrap() >= 0.0);
            prop_assert!(loss_body(y.view(), &tree, &a).unwrap() >= 0.0);
            prop_assert_eq!(loss_va(x.view(), x.view(), 30.0).unwrap(), 0.0);
            prop_assert_eq!(loss_fk(x.view(), x.view(), &tree).unwrap(), 0.0);
        }

        #[test]
        fn va_and_fk_ignore_shared_root_translation(seed in 0u64..1000, dx in -2.0f64..2.0, dz in -2.0f64..2.0) {
            let tree = JointTree::smpl();
            let x = poses(4, seed);
            let y = poses(4, seed + 7);
            let shift = |m: &Array2<f64>| {
                let mut m = m.clone();
                m.column_mut(0).mapv_inplace(|v| v + dx);
                m.column_mut(2).mapv_inplace(|v| v + dz);
                m
            };
            let (xs, ys) = (shift(&x), shift(&y));
            let va = loss_va(x.view(), y.view(), 30.0).unwrap();
            prop_assert!((va - loss_va(xs.view(), ys.view(), 30.0).unwrap()).abs() <= 1e-9 * va.max(1.0));
            let fk = loss_fk(x.view(), y.view(), &tree).unwrap();
            prop_assert!((fk - loss_fk(xs.view(), ys.view(), &tree).unwrap()).abs() <= 1e-9 * fk.max(1.0));
        }
    }
}
