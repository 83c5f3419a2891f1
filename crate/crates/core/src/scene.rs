//! Learnable scene state: the Gaussian cloud, its initialization from a sparse
//! point set, and scene-extent bookkeeping.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gsmath::{logit, normalize_quat, sigmoid, GaussianParams};
use crate::sh;

/// Initial opacity of freshly initialized Gaussians.
pub const INIT_OPACITY: f64 = 0.1;
/// Lower bound on the mean squared neighbor distance used for initial scales.
pub const MIN_INIT_DIST2: f64 = 1e-7;

/// Colored sparse point set, e.g. the `points3D` of a reconstruction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSet {
    pub positions: Vec<Vector3<f64>>,
    /// RGB in `[0, 1]`.
    pub colors: Vec<Vector3<f64>>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Structure-of-arrays Gaussian cloud.
///
/// SH coefficients are stored coefficient-major: Gaussian `i` owns
/// `sh_coeffs[i * 3K .. (i + 1) * 3K]` with `K = (sh_degree + 1)^2`, and each
/// coefficient holds three consecutive channel values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub sh_degree: usize,
    pub positions: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
    pub alive: Vec<bool>,
}

impl GaussianCloud {
    pub fn empty(sh_degree: usize) -> Self {
        GaussianCloud {
            sh_degree,
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            sh_coeffs: Vec::new(),
            alive: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Coefficients per channel.
    pub fn sh_count(&self) -> usize {
        sh::coeff_count(self.sh_degree)
    }

    /// Values per Gaussian in `sh_coeffs`.
    pub fn sh_stride(&self) -> usize {
        3 * self.sh_count()
    }

    pub fn sh(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh_coeffs[i * s..(i + 1) * s]
    }

    pub fn sh_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.sh_stride();
        &mut self.sh_coeffs[i * s..(i + 1) * s]
    }

    pub fn params(&self, i: usize) -> GaussianParams {
        GaussianParams {
            position: self.positions[i],
            log_scale: self.log_scales[i],
            rotation: self.rotations[i],
        }
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn max_scale(&self, i: usize) -> f64 {
        self.log_scales[i].map(f64::exp).max()
    }

    /// Appends a Gaussian; `sh` must have `sh_stride()` entries.
    pub fn push(&mut self, position: Vector3<f64>, log_scale: Vector3<f64>, rotation: [f64; 4], opacity_logit: f64, sh: &[f64]) {
        assert_eq!(sh.len(), self.sh_stride(), "SH coefficient count mismatch");
        self.positions.push(position);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation);
        self.opacity_logits.push(opacity_logit);
        self.sh_coeffs.extend_from_slice(sh);
        self.alive.push(true);
    }

    /// Appends an exact copy of Gaussian `i`.
    pub fn push_copy_of(&mut self, i: usize) {
        let s = self.sh_stride();
        self.positions.push(self.positions[i]);
        self.log_scales.push(self.log_scales[i]);
        self.rotations.push(self.rotations[i]);
        self.opacity_logits.push(self.opacity_logits[i]);
        self.sh_coeffs.extend_from_within(i * s..(i + 1) * s);
        self.alive.push(self.alive[i]);
    }

    /// Keeps the Gaussians where `keep[i]` is true, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let s = self.sh_stride();
        let mut it = keep.iter();
        self.positions.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.log_scales.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.rotations.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.opacity_logits.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.alive.retain(|_| *it.next().unwrap());
        let mut sh = Vec::with_capacity(self.positions.len() * s);
        for (i, &k) in keep.iter().enumerate() {
            if k {
                sh.extend_from_slice(&self.sh_coeffs[i * s..(i + 1) * s]);
            }
        }
        self.sh_coeffs = sh;
    }

    /// Drops every Gaussian whose `alive` flag is cleared.
    pub fn compact(&mut self) {
        let keep = self.alive.clone();
        self.retain_mask(&keep);
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            if let Ok(n) = normalize_quat(*q) {
                *q = n;
            }
        }
    }

    /// Checks every structural and numeric invariant of the cloud.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.opacity_logits.len() != n
            || self.alive.len() != n
            || self.sh_coeffs.len() != n * self.sh_stride()
        {
            return Err(Error::invalid("per-Gaussian arrays have mismatched lengths"));
        }
        if self.sh_degree > sh::MAX_SH_DEGREE {
            return Err(Error::invalid(format!("SH degree {} exceeds {}", self.sh_degree, sh::MAX_SH_DEGREE)));
        }
        for i in 0..n {
            if !self.positions[i].iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("gaussian {i}: non-finite position")));
            }
            let s = self.log_scales[i].map(f64::exp);
            if !s.iter().all(|v| *v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("gaussian {i}: scale not positive and finite")));
            }
            let q = self.rotations[i];
            let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if (qn - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("gaussian {i}: rotation norm {qn} is not unit")));
            }
            let o = self.opacity(i);
            if !(o > 0.0 && o < 1.0) {
                return Err(Error::invalid(format!("gaussian {i}: opacity {o} outside (0, 1)")));
            }
        }
        if !self.sh_coeffs.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite SH coefficient"));
        }
        Ok(())
    }
}

/// Scene extent derived from the training cameras.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBounds {
    pub center: Vector3<f64>,
    pub radius: f64,
}

impl SceneBounds {
    /// Fewer than two distinct camera centers: depth scaling is disabled.
    pub fn is_degenerate(&self) -> bool {
        !(self.radius > 0.0)
    }

    /// Length scale for learning rates and split/clone decisions.
    pub fn extent(&self) -> f64 {
        if self.is_degenerate() {
            1.0
        } else {
            self.radius
        }
    }
}

/// Center is the mean camera position, radius is 1.1x the largest distance to it.
pub fn scene_radius(cameras: &[Camera]) -> Result<SceneBounds> {
    if cameras.is_empty() {
        return Err(Error::invalid("scene_radius needs at least one camera"));
    }
    let centers: Vec<Vector3<f64>> = cameras.iter().map(Camera::center).collect();
    let center = centers.iter().fold(Vector3::zeros(), |acc, c| acc + c) / centers.len() as f64;
    let max_dist = centers.iter().map(|c| (c - center).norm()).fold(0.0, f64::max);
    Ok(SceneBounds {
        center,
        radius: 1.1 * max_dist,
    })
}

fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Three nearest neighbors as `(squared distance, index)`, ascending, ties by index.
type Knn3 = [(f64, usize); 3];

struct KdTree<'a> {
    points: &'a [Vector3<f64>],
    nodes: Vec<KdNode>,
}

enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

const KD_LEAF: usize = 12;

impl<'a> KdTree<'a> {
    fn build(points: &'a [Vector3<f64>]) -> (Self, Vec<usize>) {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree { points, nodes: Vec::new() };
        let len = order.len();
        tree.build_node(&mut order, 0, len);
        (tree, order)
    }

    fn build_node(&mut self, order: &mut [usize], start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= KD_LEAF {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let slice = &mut order[start..end];
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in slice.iter() {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = slice.len() / 2;
        let pts = self.points;
        slice.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let value = pts[slice[mid]][axis];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build_node(order, start, start + mid);
        let right = self.build_node(order, start + mid, end);
        self.nodes[id] = KdNode::Split { axis, value, left, right };
        id
    }

    fn query(&self, order: &[usize], q: usize) -> Knn3 {
        let mut best = [(f64::INFINITY, usize::MAX); 3];
        self.visit(order, 0, q, &mut best);
        best
    }

    fn visit(&self, order: &[usize], node: usize, q: usize, best: &mut Knn3) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &j in &order[start..end] {
                    if j == q {
                        continue;
                    }
                    insert_candidate(best, (dist2(&self.points[q], &self.points[j]), j));
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = self.points[q][axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.visit(order, near, q, best);
                // Equal distances must still be explored for index tie-breaks.
                if diff * diff <= best[2].0 {
                    self.visit(order, far, q, best);
                }
            }
        }
    }
}

fn insert_candidate(best: &mut Knn3, cand: (f64, usize)) {
    let less = |a: (f64, usize), b: (f64, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
    if !less(cand, best[2]) {
        return;
    }
    best[2] = cand;
    if less(best[2], best[1]) {
        best.swap(1, 2);
        if less(best[1], best[0]) {
            best.swap(0, 1);
        }
    }
}

/// Per-point initial axis length `sqrt((d1² + d2² + d3²) / 3)` over the three
/// nearest other points (exact, ties broken by index). No clamping.
pub fn knn_init_radii(points: &[Vector3<f64>]) -> Result<Vec<f64>> {
    if points.len() < 4 {
        return Err(Error::InsufficientPoints {
            required: 4,
            actual: points.len(),
        });
    }
    if !points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
        return Err(Error::invalid("non-finite point coordinate"));
    }
    let (tree, order) = KdTree::build(points);
    Ok((0..points.len())
        .map(|i| {
            let nn = tree.query(&order, i);
            ((nn[0].0 + nn[1].0 + nn[2].0) / 3.0).sqrt()
        })
        .collect())
}

/// Isotropic Gaussians at each point, axis length from [`knn_init_radii`],
/// identity rotation, opacity [`INIT_OPACITY`], DC color from the point color.
pub fn init_from_points(points: &PointSet, sh_degree: usize) -> Result<GaussianCloud> {
    if points.colors.len() != points.positions.len() {
        return Err(Error::invalid("points and colors differ in length"));
    }
    if sh_degree > sh::MAX_SH_DEGREE {
        return Err(Error::invalid(format!("SH degree {sh_degree} exceeds {}", sh::MAX_SH_DEGREE)));
    }
    let radii = knn_init_radii(&points.positions)?;
    let mut cloud = GaussianCloud::empty(sh_degree);
    let stride = cloud.sh_stride();
    let mut coeffs = vec![0.0; stride];
    for (i, r) in radii.iter().enumerate() {
        let log_s = 0.5 * (r * r).max(MIN_INIT_DIST2).ln();
        let c = points.colors[i];
        coeffs.iter_mut().for_each(|v| *v = 0.0);
        for ch in 0..3 {
            coeffs[ch] = sh::rgb_to_dc(c[ch]);
        }
        cloud.push(points.positions[i], Vector3::repeat(log_s), [1.0, 0.0, 0.0, 0.0], logit(INIT_OPACITY), &coeffs);
    }
    Ok(cloud)
}

/// Uniformly random subset keeping `ceil(M * (1 - fraction))` points.
pub fn drop_points(points: &PointSet, fraction: f64, seed: u64) -> Result<PointSet> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("drop fraction {fraction} outside [0, 1)")));
    }
    let m = points.len();
    // The epsilon absorbs representation error in (1 - fraction), e.g. 1 - 0.99.
    let keep = ((m as f64) * (1.0 - fraction) - 1e-9).ceil().max(0.0) as usize;
    let keep = keep.min(m);
    if keep < 4 {
        return Err(Error::InsufficientPoints { required: 4, actual: keep });
    }
    if keep == m {
        return Ok(points.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, m, keep).into_vec();
    idx.sort_unstable();
    Ok(PointSet {
        positions: idx.iter().map(|&i| points.positions[i]).collect(),
        colors: idx.iter().map(|&i| points.colors[i]).collect(),
    })
}
