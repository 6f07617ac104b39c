//! Pose layout, 6D rotations, the SMPL joint tree and forward kinematics.
//!
//! A pose frame is a flat 156-vector:
//!
//! ```text
//! [0..3)     root translation (meters)
//! [3..147)   24 joints x rot6d (first two rotation-matrix columns)
//! [147..156) 9 contact flags
//! ```

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::Deserialize;

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 24;
pub const NUM_CONTACTS: usize = 9;
pub const ROT_OFFSET: usize = 3;
pub const CONTACT_OFFSET: usize = ROT_OFFSET + NUM_JOINTS * 6;
pub const POSE_DIM: usize = CONTACT_OFFSET + NUM_CONTACTS;

pub const PELVIS: usize = 0;
pub const LEFT_ANKLE: usize = 7;
pub const RIGHT_ANKLE: usize = 8;
pub const LEFT_FOOT: usize = 10;
pub const RIGHT_FOOT: usize = 11;
pub const NECK: usize = 12;
pub const LEFT_COLLAR: usize = 13;
pub const RIGHT_COLLAR: usize = 14;
pub const HEAD: usize = 15;
pub const LEFT_HAND: usize = 22;
pub const RIGHT_HAND: usize = 23;

pub const SMPL_PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

/// Row-major 3x3 matrix, `m[row][col]`.
pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];
/// Joint positions of one frame.
pub type Joints = [Vec3; NUM_JOINTS];

const CANONICAL_SKELETON: &str = include_str!("../data/smpl_offsets.json");

#[derive(Debug, Clone, PartialEq)]
pub struct JointTree {
    parent: [Option<usize>; NUM_JOINTS],
    rest_offset: [Vec3; NUM_JOINTS],
    level: [usize; NUM_JOINTS],
}

#[derive(Deserialize)]
struct SkeletonFile {
    parents: Vec<i64>,
    offsets: Vec<Vec3>,
}

impl JointTree {
    /// Builds a tree, checking the topological and single-root invariants.
    pub fn new(parent: [Option<usize>; NUM_JOINTS], rest_offset: [Vec3; NUM_JOINTS]) -> Result<Self> {
        if parent[0].is_some() {
            return Err(Error::Invalid("joint 0 must be the root".into()));
        }
        let mut level = [0usize; NUM_JOINTS];
        for j in 1..NUM_JOINTS {
            match parent[j] {
                Some(p) if p < j => level[j] = level[p] + 1,
                Some(p) => {
                    return Err(Error::Invalid(format!(
                        "joint {j} has parent {p}, parents must precede children"
                    )))
                }
                None => return Err(Error::Invalid(format!("joint {j} is a second root"))),
            }
        }
        Ok(Self {
            parent,
            rest_offset,
            level,
        })
    }

    /// The SMPL hierarchy with the bundled canonical rest offsets.
    pub fn smpl() -> Self {
        let file: SkeletonFile =
            serde_json::from_str(CANONICAL_SKELETON).expect("bundled skeleton is valid json");
        let mut parent = [None; NUM_JOINTS];
        let mut offsets = [[0.0; 3]; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            parent[j] = usize::try_from(file.parents[j]).ok();
            offsets[j] = file.offsets[j];
        }
        Self::new(parent, offsets).expect("bundled skeleton is a valid tree")
    }

    /// SMPL hierarchy with caller-provided offsets.
    pub fn smpl_with_offsets(rest_offset: [Vec3; NUM_JOINTS]) -> Self {
        Self::new(SMPL_PARENTS, rest_offset).expect("SMPL parents are topologically ordered")
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    pub fn rest_offset(&self, joint: usize) -> Vec3 {
        self.rest_offset[joint]
    }

    pub fn level(&self, joint: usize) -> usize {
        self.level[joint]
    }

    pub fn children(&self, joint: usize) -> Vec<usize> {
        (0..NUM_JOINTS)
            .filter(|&j| self.parent[j] == Some(joint))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseFrame {
    pub root_translation: Vec3,
    pub joint_rot6d: [[f64; 6]; NUM_JOINTS],
    pub contacts: [f64; NUM_CONTACTS],
}

impl Default for PoseFrame {
    fn default() -> Self {
        Self {
            root_translation: [0.0; 3],
            joint_rot6d: [[0.0; 6]; NUM_JOINTS],
            contacts: [0.0; NUM_CONTACTS],
        }
    }
}

impl PoseFrame {
    /// Rest pose (identity rotations) at a given root translation.
    pub fn identity(root_translation: Vec3) -> Self {
        Self {
            root_translation,
            joint_rot6d: [IDENTITY_6D; NUM_JOINTS],
            contacts: [0.0; NUM_CONTACTS],
        }
    }

    pub fn flatten(&self) -> [f64; POSE_DIM] {
        let mut out = [0.0; POSE_DIM];
        out[..3].copy_from_slice(&self.root_translation);
        for (j, r) in self.joint_rot6d.iter().enumerate() {
            out[ROT_OFFSET + 6 * j..ROT_OFFSET + 6 * j + 6].copy_from_slice(r);
        }
        out[CONTACT_OFFSET..].copy_from_slice(&self.contacts);
        out
    }

    pub fn unflatten(flat: &[f64]) -> Result<Self> {
        if flat.len() != POSE_DIM {
            return Err(Error::shape("pose frame", POSE_DIM, flat.len()));
        }
        let mut frame = PoseFrame::default();
        frame.root_translation.copy_from_slice(&flat[..3]);
        for j in 0..NUM_JOINTS {
            frame.joint_rot6d[j].copy_from_slice(&flat[ROT_OFFSET + 6 * j..ROT_OFFSET + 6 * j + 6]);
        }
        frame.contacts.copy_from_slice(&flat[CONTACT_OFFSET..]);
        Ok(frame)
    }
}

pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<PoseFrame>,
    pub fps: u32,
}

impl MotionSequence {
    pub fn new(frames: Vec<PoseFrame>, fps: u32) -> Result<Self> {
        if fps == 0 {
            return Err(Error::config("fps", "must be positive"));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames stacked into an `N x 156` matrix.
    pub fn to_array(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.frames.len(), POSE_DIM));
        for (i, f) in self.frames.iter().enumerate() {
            out.row_mut(i)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&f.flatten());
        }
        out
    }

    pub fn from_array(x: ArrayView2<f64>, fps: u32) -> Result<Self> {
        if x.ncols() != POSE_DIM {
            return Err(Error::shape("motion array", POSE_DIM, x.ncols()));
        }
        let frames = x
            .rows()
            .into_iter()
            .map(|r| PoseFrame::unflatten(&r.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames, fps)
    }
}

fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn columns_to_matrix(b1: &Vec3, b2: &Vec3, b3: &Vec3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        m[r] = [b1[r], b2[r], b3[r]];
    }
    m
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [dot(&a[0], v), dot(&a[1], v), dot(&a[2], v)]
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[c][r];
        }
    }
    out
}

const DEGENERATE_TOL: f64 = 1e-12;

/// Gram-Schmidt completion of a 6D rotation (two columns) to a proper rotation matrix.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Result<Mat3> {
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let n1 = norm(&a1);
    if n1 <= DEGENERATE_TOL {
        return Err(Error::DegenerateRotation("first column has zero norm".into()));
    }
    let b1 = a1.map(|x| x / n1);
    let d = dot(&b1, &a2);
    let u = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = norm(&u);
    if n2 <= DEGENERATE_TOL * norm(&a2).max(1.0) {
        return Err(Error::DegenerateRotation(
            "second column is zero or parallel to the first".into(),
        ));
    }
    let b2 = u.map(|x| x / n2);
    let b3 = cross(&b1, &b2);
    Ok(columns_to_matrix(&b1, &b2, &b3))
}

/// Inverse of [`rot6d_to_matrix`] for rotation matrices.
pub fn matrix_to_rot6d(m: &Mat3) -> [f64; 6] {
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Rotation about a unit axis by `angle` radians (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let n = norm(&axis);
    let [x, y, z] = axis.map(|a| a / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

// Smoothed Gram-Schmidt used inside losses: never fails, and agrees with the
// strict version to machine precision on well-conditioned input.
const SOFT_EPS: f64 = 1e-16;

struct SoftGs {
    a2: Vec3,
    b1: Vec3,
    b2: Vec3,
    n1: f64,
    n2: f64,
    d: f64,
}

fn soft_gram_schmidt(r: &[f64]) -> (Mat3, SoftGs) {
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let n1 = (dot(&a1, &a1) + SOFT_EPS).sqrt();
    let b1 = a1.map(|x| x / n1);
    let d = dot(&b1, &a2);
    let u = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = (dot(&u, &u) + SOFT_EPS).sqrt();
    let b2 = u.map(|x| x / n2);
    let b3 = cross(&b1, &b2);
    (
        columns_to_matrix(&b1, &b2, &b3),
        SoftGs {
            a2,
            b1,
            b2,
            n1,
            n2,
            d,
        },
    )
}

/// Pulls a gradient on the rotation matrix back to the 6D input.
fn soft_gram_schmidt_backward(gs: &SoftGs, grad_m: &Mat3) -> [f64; 6] {
    let col = |c: usize| [grad_m[0][c], grad_m[1][c], grad_m[2][c]];
    let (mut g1, mut g2, g3) = (col(0), col(1), col(2));
    let SoftGs {
        a2,
        b1,
        b2,
        n1,
        n2,
        d,
    } = gs;
    // b3 = b1 x b2
    let t1 = cross(b2, &g3);
    let t2 = cross(&g3, b1);
    for k in 0..3 {
        g1[k] += t1[k];
        g2[k] += t2[k];
    }
    // b2 = u / n2 (with n2 = sqrt(|u|^2 + eps), so d n2 = u.du / n2)
    let p2 = dot(b2, &g2);
    let gu: Vec3 = std::array::from_fn(|k| (g2[k] - b2[k] * p2) / n2);
    // u = a2 - d b1
    let mut ga2 = gu;
    let gd = -dot(b1, &gu);
    for k in 0..3 {
        g1[k] += -d * gu[k] + gd * a2[k];
        ga2[k] += gd * b1[k];
    }
    // b1 = a1 / n1
    let p1 = dot(b1, &g1);
    let ga1: Vec3 = std::array::from_fn(|k| (g1[k] - b1[k] * p1) / n1);
    [ga1[0], ga1[1], ga1[2], ga2[0], ga2[1], ga2[2]]
}

/// Forward kinematics for one flat pose. Global rotations compose down the tree;
/// each joint sits at its parent's position plus the parent's global rotation
/// applied to its rest offset.
pub fn fk_pose(pose: &[f64], tree: &JointTree) -> Result<Joints> {
    let mut local = [[[0.0; 3]; 3]; NUM_JOINTS];
    for (j, l) in local.iter_mut().enumerate() {
        let r: [f64; 6] = pose[ROT_OFFSET + 6 * j..ROT_OFFSET + 6 * j + 6]
            .try_into()
            .expect("six values");
        *l = rot6d_to_matrix(&r).map_err(|_| Error::DegenerateJoint { frame: 0, joint: j })?;
    }
    Ok(fk_from_local(pose, &local, tree).0)
}

fn fk_from_local(
    pose: &[f64],
    local: &[Mat3; NUM_JOINTS],
    tree: &JointTree,
) -> (Joints, [Mat3; NUM_JOINTS]) {
    let mut global = [[[0.0; 3]; 3]; NUM_JOINTS];
    let mut pos = [[0.0; 3]; NUM_JOINTS];
    pos[0] = [pose[0], pose[1], pose[2]];
    global[0] = local[0];
    for j in 1..NUM_JOINTS {
        let p = tree.parent[j].expect("non-root joint has a parent");
        let off = mat_vec(&global[p], &tree.rest_offset[j]);
        pos[j] = [pos[p][0] + off[0], pos[p][1] + off[1], pos[p][2] + off[2]];
        global[j] = mat_mul(&global[p], &local[j]);
    }
    (pos, global)
}

/// Forward kinematics over a whole sequence.
pub fn forward_kinematics(seq: &MotionSequence, tree: &JointTree) -> Result<Vec<Joints>> {
    seq.frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            fk_pose(&f.flatten(), tree).map_err(|e| match e {
                Error::DegenerateJoint { joint, .. } => Error::DegenerateJoint { frame: i, joint },
                other => other,
            })
        })
        .collect()
}

/// Forward kinematics on an `N x 156` array.
pub fn forward_kinematics_array(x: ArrayView2<f64>, tree: &JointTree) -> Result<Vec<Joints>> {
    x.rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            fk_pose(&row.to_vec(), tree).map_err(|e| match e {
                Error::DegenerateJoint { joint, .. } => Error::DegenerateJoint { frame: i, joint },
                other => other,
            })
        })
        .collect()
}

/// Differentiable forward kinematics for one pose: positions plus a closure
/// state that maps position gradients back onto the flat pose.
pub struct FkTape {
    pub positions: Joints,
    local: [Mat3; NUM_JOINTS],
    global: [Mat3; NUM_JOINTS],
    gs: Vec<SoftGs>,
}

impl FkTape {
    pub fn new(pose: ArrayView1<f64>, tree: &JointTree) -> Self {
        let pose = pose.to_vec();
        let mut local = [[[0.0; 3]; 3]; NUM_JOINTS];
        let mut gs = Vec::with_capacity(NUM_JOINTS);
        for (j, l) in local.iter_mut().enumerate() {
            let (m, cache) = soft_gram_schmidt(&pose[ROT_OFFSET + 6 * j..ROT_OFFSET + 6 * j + 6]);
            *l = m;
            gs.push(cache);
        }
        let (positions, global) = fk_from_local(&pose, &local, tree);
        Self {
            positions,
            local,
            global,
            gs,
        }
    }

    /// Accumulates `d loss / d pose` given `d loss / d positions`.
    pub fn backward(&self, grad_pos: &Joints, tree: &JointTree, grad_pose: &mut [f64]) {
        let mut gp = *grad_pos;
        let mut gg = [[[0.0; 3]; 3]; NUM_JOINTS];
        let mut gl = [[[0.0; 3]; 3]; NUM_JOINTS];
        for k in (1..NUM_JOINTS).rev() {
            let j = tree.parent[k].expect("non-root joint has a parent");
            let off = tree.rest_offset[k];
            for a in 0..3 {
                gp[j][a] += gp[k][a];
                for b in 0..3 {
                    gg[j][a][b] += gp[k][a] * off[b];
                }
            }
            // global[k] = global[j] * local[k]
            let lt = transpose(&self.local[k]);
            let add = mat_mul(&gg[k], &lt);
            for a in 0..3 {
                for b in 0..3 {
                    gg[j][a][b] += add[a][b];
                }
            }
            gl[k] = mat_mul(&transpose(&self.global[j]), &gg[k]);
        }
        gl[0] = gg[0];
        for a in 0..3 {
            grad_pose[a] += gp[0][a];
        }
        for j in 0..NUM_JOINTS {
            let g6 = soft_gram_schmidt_backward(&self.gs[j], &gl[j]);
            for (k, g) in g6.iter().enumerate() {
                grad_pose[ROT_OFFSET + 6 * j + k] += g;
            }
        }
    }
}

/// Body points tracked by the nine contact slots, and whether each is a foot
/// slot (which additionally requires ground proximity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
pub struct ContactAssignment {
    pub joints: [usize; NUM_CONTACTS],
    pub is_foot: [bool; NUM_CONTACTS],
}

impl Default for ContactAssignment {
    /// `[L-heel, L-toe, R-heel, R-toe, L-hand, R-hand, head, neck, root]`
    fn default() -> Self {
        Self {
            joints: [
                LEFT_ANKLE, LEFT_FOOT, RIGHT_ANKLE, RIGHT_FOOT, LEFT_HAND, RIGHT_HAND, HEAD, NECK,
                PELVIS,
            ],
            is_foot: [true, true, true, true, false, false, false, false, false],
        }
    }
}

/// Labels contacts from joint positions: a slot is 1 when its point moves
/// slower than `vel_eps` (m/s) and, for foot slots, sits below `height_eps`.
/// The last frame reuses the final velocity.
pub fn compute_contacts(
    positions: &[Joints],
    fps: f64,
    vel_eps: f64,
    height_eps: f64,
    assignment: &ContactAssignment,
) -> Result<Vec<[f64; NUM_CONTACTS]>> {
    let n = positions.len();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = if i + 1 < n { (i, i + 1) } else { (n - 2, n - 1) };
        let mut bits = [0.0; NUM_CONTACTS];
        for (s, bit) in bits.iter_mut().enumerate() {
            let j = assignment.joints[s];
            let d: Vec3 = std::array::from_fn(|k| positions[b][j][k] - positions[a][j][k]);
            let speed = norm(&d) * fps;
            let grounded = !assignment.is_foot[s] || positions[i][j][2] < height_eps;
            if speed < vel_eps && grounded {
                *bit = 1.0;
            }
        }
        out.push(bits);
    }
    Ok(out)
}

/// Forward-difference velocities, `(x[i+1] - x[i]) * fps`, one row per frame pair.
pub fn velocities(x: ArrayView2<f64>, fps: f64) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    let diff = &x.slice(ndarray::s![1.., ..]) - &x.slice(ndarray::s![..n - 1, ..]);
    Ok(diff * fps)
}

/// Second forward differences, `(v[i+1] - v[i]) * fps`.
pub fn accelerations(x: ArrayView2<f64>, fps: f64) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n < 3 {
        return Err(Error::TooShort { needed: 3, got: n });
    }
    let v = velocities(x, fps)?;
    velocities(v.view(), fps)
}

/// Joint positions flattened to `N x 72` for use with the difference helpers.
pub fn joints_to_array(positions: &[Joints]) -> Array2<f64> {
    let mut out = Array2::zeros((positions.len(), NUM_JOINTS * 3));
    for (i, p) in positions.iter().enumerate() {
        for j in 0..NUM_JOINTS {
            for k in 0..3 {
                out[[i, 3 * j + k]] = p[j][k];
            }
        }
    }
    out
}
