//! The optimization engine: nearest-neighbor losses, analytic gradients
//! assembled from the sampler's reverse pass, initialization from the target
//! cloud, and the two-stage fitting loop with its weight schedule.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::time::Instant;

use crate::cloud::{estimate_normals_at, fps_indices, mean_nn_spacing};
use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::model::{Anchor, MashModel, RayParam};
use crate::sampler::{
    boundary_rays, fibonacci_presample, filter_in_mask, forward_point, pullback_point, AnchorFrame,
    SampleOptions, SampleScratch,
};

/// Everything the fitter needs to know; `None` fields are derived from the
/// target cloud's sampling density.
#[derive(Clone, Debug)]
pub struct FitConfig {
    pub anchors: usize,
    pub sh_degree: u32,
    pub mask_degree: u32,
    /// Presampled directions per anchor.
    pub n_dir: u32,
    /// Boundary-ring samples per anchor.
    pub n_bd: usize,
    /// Offset of anchors from their seed points; default 2x mean
    /// nearest-neighbor spacing.
    pub d_init: Option<f64>,
    pub max_iters: usize,
    /// Radius within which a target point counts as covered; default 2x mean
    /// nearest-neighbor spacing.
    pub coverage_tau: Option<f64>,
    pub seed: u64,
    pub lr_pose: f64,
    pub lr_sh: f64,
    pub lr_mask: f64,
    pub convergence_window: usize,
    pub convergence_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            anchors: 400,
            sh_degree: 2,
            mask_degree: 3,
            n_dir: 400,
            n_bd: 36,
            d_init: None,
            max_iters: 2000,
            coverage_tau: None,
            seed: 0,
            lr_pose: 2e-3,
            lr_sh: 5e-3,
            lr_mask: 5e-3,
            convergence_window: 50,
            convergence_tol: 1e-4,
        }
    }
}

fn validate(cfg: &FitConfig) -> Result<()> {
    let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
    if cfg.anchors == 0 {
        return bad("anchor count must be at least 1");
    }
    if cfg.n_dir < 16 {
        return bad("n_dir must be at least 16");
    }
    if cfg.n_bd < 3 {
        return bad("n_bd must be at least 3");
    }
    if cfg.max_iters == 0 {
        return bad("max_iters must be at least 1");
    }
    if !(cfg.lr_pose > 0.0 && cfg.lr_sh > 0.0 && cfg.lr_mask > 0.0) {
        return bad("learning rates must be positive");
    }
    if cfg.convergence_window == 0 {
        return bad("convergence window must be at least 1");
    }
    if !(cfg.convergence_tol > 0.0) {
        return bad("convergence tolerance must be positive");
    }
    if let Some(t) = cfg.coverage_tau {
        if !(t > 0.0) {
            return bad("coverage_tau must be positive");
        }
    }
    if let Some(d) = cfg.d_init {
        if !(d > 0.0) {
            return bad("d_init must be positive");
        }
    }
    Ok(())
}

/// Loss term weights (fitting, coverage, boundary).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub w_f: f64,
    pub w_c: f64,
    pub w_b: f64,
}

/// The three raw loss components of one evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub l_f: f64,
    pub l_c: f64,
    pub l_b: f64,
}

impl LossParts {
    pub fn total(&self, w: Weights) -> f64 {
        total_loss(self.l_f, self.l_c, self.l_b, w)
    }
}

/// One fitting iteration as recorded in the report.
#[derive(Clone, Debug)]
pub struct FitRecord {
    pub iteration: usize,
    pub l_f: f64,
    pub l_c: f64,
    pub l_b: f64,
    pub total: f64,
    pub w_f: f64,
    pub w_c: f64,
    pub w_b: f64,
    pub coverage: f64,
    pub stage: u8,
    pub millis: f64,
}

/// Full per-iteration history of a fit.
#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub records: Vec<FitRecord>,
    pub converged: bool,
}

impl FitReport {
    pub fn iterations_run(&self) -> usize {
        self.records.len()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,L_f,L_c,L_b,L,wf,wc,wb,coverage,stage,ms")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.l_f,
                r.l_c,
                r.l_b,
                r.total,
                r.w_f,
                r.w_c,
                r.w_b,
                r.coverage,
                r.stage,
                r.millis
            )?;
        }
        Ok(())
    }
}

/// The fitting target: points plus their spatial index and sampling density.
pub struct TargetCloud {
    points: Vec<Vector3<f64>>,
    pub(crate) tree: KdTree,
    mean_spacing: f64,
}

impl TargetCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        let tree = KdTree::new(&points);
        let mean_spacing = mean_nn_spacing(&points);
        Ok(TargetCloud {
            points,
            tree,
            mean_spacing,
        })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mean nearest-neighbor spacing; 0 for degenerate single-position clouds.
    pub fn mean_spacing(&self) -> f64 {
        self.mean_spacing
    }
}

/// Mean distance from each sample point to its nearest target point.
pub fn fitting_loss(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let tree = KdTree::new(q);
    let dists: Vec<f64> = p
        .par_iter()
        .map(|x| tree.nearest(x).unwrap().1.sqrt())
        .collect();
    Ok(dists.iter().sum::<f64>() / p.len() as f64)
}

/// Mean distance from each target point to its nearest sample point: the
/// mirror image of [`fitting_loss`], pulling samples to uncovered targets.
pub fn coverage_loss(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> Result<f64> {
    fitting_loss(q, p)
}

/// Mean distance from each anchor's boundary ring to the union of every
/// other anchor's ring, averaged over anchors. A single anchor has no other
/// rings to meet, so the term is defined as 0 there.
pub fn boundary_loss(boundary_sets: &[Vec<Vector3<f64>>]) -> Result<f64> {
    let m = boundary_sets.len();
    if m == 0 {
        return Err(Error::EmptyPointSet);
    }
    if m == 1 {
        log::warn!("boundary loss with a single anchor is identically 0");
        return Ok(0.0);
    }
    if boundary_sets.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptyPointSet);
    }
    let mut flat = Vec::new();
    let mut label = Vec::new();
    for (i, s) in boundary_sets.iter().enumerate() {
        flat.extend_from_slice(s);
        label.extend(std::iter::repeat(i as u32).take(s.len()));
    }
    let tree = KdTree::new(&flat);
    let mut total = 0.0;
    for (i, s) in boundary_sets.iter().enumerate() {
        let mut acc = 0.0;
        for p in s {
            let (_, d2) = tree
                .nearest_filtered(p, |t| label[t as usize] != i as u32)
                .expect("other anchors have boundary points");
            acc += d2.sqrt();
        }
        total += acc / s.len() as f64;
    }
    Ok(total / m as f64)
}

/// Weighted sum of the three loss components.
pub fn total_loss(l_f: f64, l_c: f64, l_b: f64, w: Weights) -> f64 {
    w.w_f * l_f + w.w_c * l_c + w.w_b * l_b
}

/// The ray selection of one evaluation: per-anchor surface rays surviving the
/// mask, plus the fixed boundary rings.
#[derive(Clone, Debug)]
pub struct ResolvedRays {
    pub surface: Vec<Vec<RayParam>>,
    pub boundary: Vec<Vec<RayParam>>,
}

/// Select rays for every anchor under the current masks.
pub fn resolve_rays(model: &MashModel, n_bd: usize) -> ResolvedRays {
    let pre = fibonacci_presample(model.n_dir);
    ResolvedRays {
        surface: model
            .anchors
            .iter()
            .map(|a| filter_in_mask(a, &pre))
            .collect(),
        boundary: model
            .anchors
            .iter()
            .map(|a| boundary_rays(a, n_bd))
            .collect(),
    }
}

/// World-space samples flattened anchor-major, with per-anchor extents.
pub struct FlatSamples {
    pub points: Vec<Vector3<f64>>,
    pub bd_points: Vec<Vector3<f64>>,
    /// Length M+1; anchor i's surface points live at offsets[i]..offsets[i+1].
    pub offsets: Vec<usize>,
    pub bd_offsets: Vec<usize>,
}

/// Evaluate the forward map for every resolved ray.
pub fn flatten_samples(model: &MashModel, rays: &ResolvedRays) -> FlatSamples {
    let per: Vec<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> = model
        .anchors
        .par_iter()
        .enumerate()
        .map(|(i, anchor)| {
            let mut scratch = SampleScratch::new(model.sh_degree);
            let rot = crate::model::rotation_matrix(&anchor.rotvec);
            let opts = SampleOptions::default();
            let surface = rays.surface[i]
                .iter()
                .map(|r| forward_point(anchor, &rot, &mut scratch, r, opts))
                .collect();
            let boundary = rays.boundary[i]
                .iter()
                .map(|r| forward_point(anchor, &rot, &mut scratch, r, opts))
                .collect();
            (surface, boundary)
        })
        .collect();
    let mut points = Vec::new();
    let mut bd_points = Vec::new();
    let mut offsets = vec![0];
    let mut bd_offsets = vec![0];
    for (surface, boundary) in per {
        points.extend(surface);
        bd_points.extend(boundary);
        offsets.push(points.len());
        bd_offsets.push(bd_points.len());
    }
    FlatSamples {
        points,
        bd_points,
        offsets,
        bd_offsets,
    }
}

/// Nearest-neighbor assignments of one evaluation. Indices are into the flat
/// sample arrays and the target cloud; ties resolve to the lowest index.
pub struct Correspondences {
    /// Per surface sample: index of its nearest target point.
    pub fit_nn: Vec<u32>,
    /// Per target point: index of its nearest surface sample.
    pub cov_nn: Vec<u32>,
    /// Per boundary point: index of the nearest boundary point of any other
    /// anchor. Empty when the model has a single anchor.
    pub bd_nn: Vec<u32>,
}

fn bd_labels(samples: &FlatSamples) -> Vec<u32> {
    let mut label = vec![0u32; samples.bd_points.len()];
    for i in 0..samples.bd_offsets.len() - 1 {
        for l in &mut label[samples.bd_offsets[i]..samples.bd_offsets[i + 1]] {
            *l = i as u32;
        }
    }
    label
}

/// Resolve all three nearest-neighbor maps for the current samples.
pub fn resolve_correspondences(
    samples: &FlatSamples,
    target: &TargetCloud,
) -> Result<Correspondences> {
    if samples.points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let fit_nn: Vec<u32> = samples
        .points
        .par_iter()
        .map(|p| target.tree.nearest(p).unwrap().0)
        .collect();
    let sample_tree = KdTree::new(&samples.points);
    let cov_nn: Vec<u32> = target
        .points
        .par_iter()
        .map(|q| sample_tree.nearest(q).unwrap().0)
        .collect();
    let multiple_anchors = samples.bd_offsets.len() > 2;
    let bd_nn: Vec<u32> = if multiple_anchors && !samples.bd_points.is_empty() {
        let label = bd_labels(samples);
        let bd_tree = KdTree::new(&samples.bd_points);
        samples
            .bd_points
            .par_iter()
            .enumerate()
            .map(|(a, p)| {
                let la = label[a];
                bd_tree
                    .nearest_filtered(p, |t| label[t as usize] != la)
                    .expect("other anchors have boundary points")
                    .0
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(Correspondences {
        fit_nn,
        cov_nn,
        bd_nn,
    })
}

/// A complete frozen evaluation context: fixed ray selection and fixed
/// nearest-neighbor assignments. Perturbing the model and re-evaluating
/// through the same context is exactly the function the analytic gradient
/// differentiates.
pub struct FrozenEval {
    pub rays: ResolvedRays,
    pub corr: Correspondences,
}

/// Fix rays and correspondences at the model's current state.
pub fn freeze(model: &MashModel, target: &TargetCloud, n_bd: usize) -> Result<FrozenEval> {
    let rays = resolve_rays(model, n_bd);
    let samples = flatten_samples(model, &rays);
    let corr = resolve_correspondences(&samples, target)?;
    Ok(FrozenEval { rays, corr })
}

struct DistanceData {
    fit_d: Vec<f64>,
    cov_d: Vec<f64>,
    bd_d: Vec<f64>,
}

fn distance_data(samples: &FlatSamples, corr: &Correspondences, target: &TargetCloud) -> DistanceData {
    let fit_d: Vec<f64> = (0..samples.points.len())
        .into_par_iter()
        .map(|s| (samples.points[s] - target.points[corr.fit_nn[s] as usize]).norm())
        .collect();
    let cov_d: Vec<f64> = (0..target.points.len())
        .into_par_iter()
        .map(|t| (samples.points[corr.cov_nn[t] as usize] - target.points[t]).norm())
        .collect();
    let bd_d: Vec<f64> = (0..corr.bd_nn.len())
        .into_par_iter()
        .map(|a| (samples.bd_points[a] - samples.bd_points[corr.bd_nn[a] as usize]).norm())
        .collect();
    DistanceData { fit_d, cov_d, bd_d }
}

fn parts_from(dd: &DistanceData, samples: &FlatSamples) -> LossParts {
    let l_f = dd.fit_d.iter().sum::<f64>() / dd.fit_d.len() as f64;
    let l_c = dd.cov_d.iter().sum::<f64>() / dd.cov_d.len() as f64;
    let l_b = if dd.bd_d.is_empty() {
        0.0
    } else {
        let m = samples.bd_offsets.len() - 1;
        let mut total = 0.0;
        for i in 0..m {
            let (lo, hi) = (samples.bd_offsets[i], samples.bd_offsets[i + 1]);
            total += dd.bd_d[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        }
        total / m as f64
    };
    LossParts { l_f, l_c, l_b }
}

/// Loss components of `model` evaluated through a frozen context.
pub fn loss_frozen(
    model: &MashModel,
    target: &TargetCloud,
    frozen: &FrozenEval,
) -> LossParts {
    let samples = flatten_samples(model, &frozen.rays);
    let dd = distance_data(&samples, &frozen.corr, target);
    parts_from(&dd, &samples)
}

/// Gradient of the frozen total loss with respect to every model parameter,
/// in flat layout (see [`MashModel::flatten`]).
pub fn gradient_frozen(
    model: &MashModel,
    target: &TargetCloud,
    frozen: &FrozenEval,
    weights: Weights,
) -> Result<Vec<f64>> {
    let samples = flatten_samples(model, &frozen.rays);
    let dd = distance_data(&samples, &frozen.corr, target);
    gradient_core(model, &frozen.rays, &samples, &frozen.corr, &dd, target, weights)
}

fn gradient_core(
    model: &MashModel,
    rays: &ResolvedRays,
    samples: &FlatSamples,
    corr: &Correspondences,
    dd: &DistanceData,
    target: &TargetCloud,
    weights: Weights,
) -> Result<Vec<f64>> {
    let np = samples.points.len();
    let nq = target.points.len();
    let zero = Vector3::zeros();

    // Per-sample adjoints of the total loss, scattered sequentially so that
    // repeated runs accumulate in the same order.
    let mut adj = vec![zero; np];
    let wf_n = weights.w_f / np as f64;
    for s in 0..np {
        let d = dd.fit_d[s];
        if d > 0.0 {
            let q = target.points[corr.fit_nn[s] as usize];
            adj[s] += (wf_n / d) * (samples.points[s] - q);
        }
    }
    let wc_n = weights.w_c / nq as f64;
    for t in 0..nq {
        let d = dd.cov_d[t];
        if d > 0.0 {
            let s = corr.cov_nn[t] as usize;
            adj[s] += (wc_n / d) * (samples.points[s] - target.points[t]);
        }
    }
    let mut adj_bd = vec![zero; samples.bd_points.len()];
    if !corr.bd_nn.is_empty() && weights.w_b != 0.0 {
        let m = samples.bd_offsets.len() - 1;
        for i in 0..m {
            let (lo, hi) = (samples.bd_offsets[i], samples.bd_offsets[i + 1]);
            let wi = weights.w_b / (m as f64 * (hi - lo) as f64);
            for a in lo..hi {
                let d = dd.bd_d[a];
                if d > 0.0 {
                    let b = corr.bd_nn[a] as usize;
                    let pull = (wi / d) * (samples.bd_points[a] - samples.bd_points[b]);
                    adj_bd[a] += pull;
                    adj_bd[b] -= pull;
                }
            }
        }
    }

    let ppa = model.params_per_anchor();
    let mut grad = vec![0.0; model.param_count()];
    grad.par_chunks_mut(ppa)
        .enumerate()
        .for_each(|(i, chunk)| {
            let anchor = &model.anchors[i];
            let frame = AnchorFrame::new(anchor);
            let mut scratch = SampleScratch::new(model.sh_degree);
            let (lo, hi) = (samples.offsets[i], samples.offsets[i + 1]);
            for s in lo..hi {
                if adj[s] != zero {
                    pullback_point(anchor, &frame, &mut scratch, &rays.surface[i][s - lo], &adj[s], chunk);
                }
            }
            let (blo, bhi) = (samples.bd_offsets[i], samples.bd_offsets[i + 1]);
            for a in blo..bhi {
                if adj_bd[a] != zero {
                    pullback_point(
                        anchor,
                        &frame,
                        &mut scratch,
                        &rays.boundary[i][a - blo],
                        &adj_bd[a],
                        chunk,
                    );
                }
            }
        });

    for (j, v) in grad.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteGradient {
                anchor: j / ppa,
                param: j % ppa,
            });
        }
    }
    Ok(grad)
}

/// Resolve rays and correspondences at the current model state, then return
/// the gradient of the weighted loss. The argmin assignments are treated as
/// locally constant (the usual nearest-neighbor subgradient).
pub fn loss_gradients(
    model: &MashModel,
    target: &TargetCloud,
    weights: Weights,
    n_bd: usize,
) -> Result<Vec<f64>> {
    let frozen = freeze(model, target, n_bd)?;
    gradient_frozen(model, target, &frozen, weights)
}

fn rotvec_z_to(t: &Vector3<f64>) -> Vector3<f64> {
    let z = Vector3::z();
    let axis = z.cross(t);
    let s = axis.norm();
    let c = z.dot(t);
    if s < 1e-12 {
        if c >= 0.0 {
            Vector3::zeros()
        } else {
            // Antipodal: any axis in the xy-plane works; pick x.
            Vector3::new(PI, 0.0, 0.0)
        }
    } else {
        (axis / s) * s.atan2(c)
    }
}

/// Build the starting model: anchors on a farthest-point subset of the
/// target, pushed off the surface along estimated normals, looking back at
/// their seed points, each starting as a hemisphere cap at distance d_init.
pub fn initialize(q: &[Vector3<f64>], cfg: &FitConfig) -> Result<MashModel> {
    validate(cfg)?;
    if q.len() < cfg.anchors {
        return Err(Error::TooFewPoints {
            needed: cfg.anchors,
            got: q.len(),
        });
    }
    let spacing = mean_nn_spacing(q);
    let d_init = cfg.d_init.unwrap_or((2.0 * spacing).max(1e-6));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let first = rng.gen_range(0..q.len());
    let picked = fps_indices(q, cfg.anchors, first);
    let tree = KdTree::new(q);
    let normals = estimate_normals_at(q, &tree, &picked, 16);
    let c00 = d_init * 2.0 * PI.sqrt();
    let anchors: Vec<Anchor> = picked
        .iter()
        .zip(&normals)
        .map(|(&idx, n)| {
            let src = q[idx as usize];
            let mut a = Anchor::zeroed(cfg.sh_degree, cfg.mask_degree);
            a.position = src + d_init * n;
            a.rotvec = rotvec_z_to(&-n);
            a.sh_coeffs[0] = c00;
            a
        })
        .collect();
    MashModel::new(anchors, cfg.sh_degree, cfg.mask_degree, cfg.n_dir)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr[i] * mh / (vh.sqrt() + EPS);
        }
    }
}

fn learning_rates(model: &MashModel, cfg: &FitConfig) -> Vec<f64> {
    let nsh = crate::sh::basis_len(model.sh_degree);
    let nmask = model.params_per_anchor() - 6 - nsh;
    let mut lr = Vec::with_capacity(model.param_count());
    for _ in 0..model.anchors.len() {
        lr.extend(std::iter::repeat(cfg.lr_pose).take(6));
        lr.extend(std::iter::repeat(cfg.lr_sh).take(nsh));
        lr.extend(std::iter::repeat(cfg.lr_mask).take(nmask));
    }
    lr
}

fn ramp1_len(max_iters: usize) -> usize {
    (max_iters / 4).min(500).max(1)
}

fn ramp2_len(max_iters: usize, s2: usize) -> usize {
    ((max_iters - s2) / 2).min(500).max(1)
}

/// Loss weights at a global iteration: the fitting weight is constant, the
/// coverage weight ramps 0.5 to 1 from the start, and the boundary weight
/// ramps 0 to 1 once the second stage begins.
fn schedule(iter: usize, max_iters: usize, stage2_start: Option<usize>) -> Weights {
    let wc = 0.5 + 0.5 * (iter as f64 / ramp1_len(max_iters) as f64).min(1.0);
    let wb = match stage2_start {
        None => 0.0,
        Some(s2) => ((iter - s2) as f64 / ramp2_len(max_iters, s2) as f64).min(1.0),
    };
    Weights {
        w_f: 1.0,
        w_c: wc,
        w_b: wb,
    }
}

/// Re-select surface rays, re-inflating any mask that has pinched shut (its
/// constant term grows by 0.5 until at least one presample survives).
fn ensure_rays(model: &mut MashModel, pre: &[(f64, f64)]) -> Result<Vec<Vec<RayParam>>> {
    let m = model.anchors.len();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut rays = filter_in_mask(&model.anchors[i], pre);
        let mut bumps = 0;
        while rays.is_empty() {
            model.anchors[i].mask_coeffs[0] += 0.5;
            bumps += 1;
            if bumps > 10_000 {
                return Err(Error::InvalidConfig(format!(
                    "anchor {i}: mask recovery failed to produce any in-mask rays"
                )));
            }
            rays = filter_in_mask(&model.anchors[i], pre);
        }
        if bumps > 0 {
            log::debug!("anchor {i}: mask re-inflated ({bumps} bumps)");
        }
        out.push(rays);
    }
    Ok(out)
}

fn has_converged(records: &[FitRecord], window: usize, tol: f64) -> bool {
    let n = records.len();
    if n < 2 * window {
        return false;
    }
    let last = &records[n - 1];
    let stationary = records[n - 2 * window..]
        .iter()
        .all(|r| r.w_f == last.w_f && r.w_c == last.w_c && r.w_b == last.w_b);
    if !stationary {
        return false;
    }
    let mean = |s: &[FitRecord]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
    let prev = mean(&records[n - 2 * window..n - window]);
    let cur = mean(&records[n - window..]);
    (prev - cur).abs() / prev.abs().max(1e-12) < tol
}

/// Fit a model to the target cloud. Returns the fitted model and the
/// per-iteration report; `report.converged` distinguishes a loss plateau
/// from running out of iterations.
pub fn fit(q: &[Vector3<f64>], cfg: &FitConfig) -> Result<(MashModel, FitReport)> {
    validate(cfg)?;
    let target = TargetCloud::new(q.to_vec())?;
    let tau = cfg.coverage_tau.unwrap_or(2.0 * target.mean_spacing());
    let mut model = initialize(q, cfg)?;
    let pre = fibonacci_presample(cfg.n_dir);
    let mut adam = Adam::new(model.param_count());
    let lr = learning_rates(&model, cfg);
    let mut records: Vec<FitRecord> = Vec::with_capacity(cfg.max_iters.min(1 << 20));
    let mut stage2_start: Option<usize> = None;
    let mut converged = false;

    for iter in 0..cfg.max_iters {
        let t0 = Instant::now();
        let surface = ensure_rays(&mut model, &pre)?;
        let boundary: Vec<Vec<RayParam>> = model
            .anchors
            .iter()
            .map(|a| boundary_rays(a, cfg.n_bd))
            .collect();
        let rays = ResolvedRays { surface, boundary };
        let samples = flatten_samples(&model, &rays);
        let corr = resolve_correspondences(&samples, &target)?;
        let dd = distance_data(&samples, &corr, &target);
        let parts = parts_from(&dd, &samples);
        let coverage =
            dd.cov_d.iter().filter(|d| **d < tau).count() as f64 / target.len() as f64;
        if stage2_start.is_none() && coverage >= 0.8 {
            stage2_start = Some(iter);
        }
        let w = schedule(iter, cfg.max_iters, stage2_start);
        let grad = gradient_core(&model, &rays, &samples, &corr, &dd, &target, w)?;
        let mut flat = model.flatten();
        adam.step(&mut flat, &grad, &lr);
        model.set_from_flat(&flat);
        model.canonicalize_rotations();
        records.push(FitRecord {
            iteration: iter,
            l_f: parts.l_f,
            l_c: parts.l_c,
            l_b: parts.l_b,
            total: parts.total(w),
            w_f: w.w_f,
            w_c: w.w_c,
            w_b: w.w_b,
            coverage,
            stage: if stage2_start.is_some() { 2 } else { 1 },
            millis: t0.elapsed().as_secs_f64() * 1e3,
        });
        if has_converged(&records, cfg.convergence_window, cfg.convergence_tol) {
            converged = true;
            break;
        }
    }
    Ok((model, FitReport { records, converged }))
}
