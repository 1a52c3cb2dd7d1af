//! Reflection-ray tracing against environment splats through a rebuilt-per-
//! frame BVH, with a brute-force twin used as the correctness reference.
//!
//! The gather stage is exact: pruning only drops subtrees whose entry depth
//! lies strictly beyond the current k-th best hit, so the returned hit set
//! and order are identical to full enumeration.

use crate::autodiff::Real;
use crate::math::{Vec3, Vec3f};
use crate::splat_math::{
    cutoff_radius, default_cutoff, eval_sh, intersect_ray_splat, intersect_surfel, PlaneHit, Ray,
    SplatHit, Surfel,
};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct TraceSettings {
    /// Most hits composited per ray, nearest first.
    pub k: usize,
    /// Minimum Gaussian weight for a hit, in (0, 1].
    pub gaussian_cutoff: f64,
    /// Compositing stops once transmittance drops below this. 0 disables.
    pub early_stop: f64,
    /// World-units offset along the surface normal applied to reflection
    /// origins before tracing, to avoid re-hitting the reflecting surface.
    pub self_offset: f64,
    /// Returned by rays that hit nothing; their transmittance stays 1.
    pub miss_color: [f64; 3],
}

impl Default for TraceSettings {
    fn default() -> Self {
        TraceSettings {
            k: 16,
            gaussian_cutoff: default_cutoff(),
            early_stop: 1e-4,
            self_offset: 1e-3,
            miss_color: [0.0; 3],
        }
    }
}

impl TraceSettings {
    /// Default settings with the self offset scaled to a scene size:
    /// one thousandth of the given bounding-box diagonal.
    pub fn for_scene_diagonal(diag: f64) -> Self {
        TraceSettings {
            self_offset: 1e-3 * diag.max(1e-6),
            ..TraceSettings::default()
        }
    }

    fn check(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("trace k must be at least 1".into()));
        }
        if !(self.gaussian_cutoff > 0.0 && self.gaussian_cutoff <= 1.0) {
            return Err(Error::Config(format!(
                "gaussian cutoff {} outside (0, 1]",
                self.gaussian_cutoff
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    lo: [f64; 3],
    hi: [f64; 3],
    left: u32,
    right: u32,
    start: u32,
    /// Nonzero marks a leaf over `order[start..start + count]`.
    count: u32,
}

/// Binary bounds tree over the cutoff-radius disks of one splat set.
/// Rebuilt from scratch whenever the splats move; no refitting.
#[derive(Clone, Debug, Default)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

const LEAF_MAX: usize = 4;
const MAX_DEPTH: usize = 64;
/// Boxes get this much absolute padding so borderline hits can never be
/// rounded out of their own node.
const BOX_PAD: f64 = 1e-9;

pub fn build_bvh(env: &[Surfel<f64>], settings: &TraceSettings) -> Bvh {
    let r = cutoff_radius(settings.gaussian_cutoff);
    let boxes: Vec<([f64; 3], [f64; 3])> = env
        .iter()
        .map(|s| {
            let (mut lo, mut hi) = s.aabb_scaled(r);
            for a in 0..3 {
                lo[a] -= BOX_PAD;
                hi[a] += BOX_PAD;
            }
            (lo, hi)
        })
        .collect();
    let mut bvh = Bvh {
        nodes: Vec::new(),
        order: (0..env.len() as u32).collect(),
    };
    if !env.is_empty() {
        let mut order = std::mem::take(&mut bvh.order);
        build_range(&mut bvh.nodes, &mut order, 0, env, &boxes, 0);
        bvh.order = order;
    }
    bvh
}

fn build_range(
    nodes: &mut Vec<Node>,
    order: &mut [u32],
    offset: usize,
    env: &[Surfel<f64>],
    boxes: &[([f64; 3], [f64; 3])],
    depth: usize,
) -> u32 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        let (blo, bhi) = boxes[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(blo[a]);
            hi[a] = hi[a].max(bhi[a]);
        }
    }
    let this = nodes.len() as u32;
    nodes.push(Node {
        lo,
        hi,
        left: 0,
        right: 0,
        start: offset as u32,
        count: order.len() as u32,
    });
    if order.len() <= LEAF_MAX || depth >= MAX_DEPTH {
        return this;
    }
    let mut axis = 0;
    let mut spread = f64::NEG_INFINITY;
    for a in 0..3 {
        let vals = order
            .iter()
            .map(|&i| [env[i as usize].center.x, env[i as usize].center.y, env[i as usize].center.z][a]);
        let (mn, mx) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), v| {
            (mn.min(v), mx.max(v))
        });
        if mx - mn > spread {
            spread = mx - mn;
            axis = a;
        }
    }
    if !(spread > 0.0) {
        // Coincident centers cannot be separated; keep the leaf.
        return this;
    }
    let key = |i: u32| {
        let c = env[i as usize].center;
        [c.x, c.y, c.z][axis]
    };
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| key(a).total_cmp(&key(b)));
    let (l, r) = order.split_at_mut(mid);
    let left = build_range(nodes, l, offset, env, boxes, depth + 1);
    let right = build_range(nodes, r, offset + mid, env, boxes, depth + 1);
    nodes[this as usize].left = left;
    nodes[this as usize].right = right;
    nodes[this as usize].count = 0;
    this
}

/// Depth at which the ray enters the box, or None when it misses the
/// clipped ray range entirely. Degenerate (NaN) axes drop out of the
/// clipping, which errs toward entering.
fn box_entry(ray: &Ray, lo: &[f64; 3], hi: &[f64; 3]) -> Option<f64> {
    let o = [ray.origin.x, ray.origin.y, ray.origin.z];
    let d = [ray.dir.x, ray.dir.y, ray.dir.z];
    let mut t0 = ray.t_min;
    let mut t1 = ray.t_max;
    for a in 0..3 {
        let inv = 1.0 / d[a];
        let ta = (lo[a] - o[a]) * inv;
        let tb = (hi[a] - o[a]) * inv;
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 <= t1).then_some(t0)
}

fn worst_pos(hits: &[SplatHit]) -> usize {
    let mut w = 0;
    for (i, h) in hits.iter().enumerate().skip(1) {
        let cur = &hits[w];
        if h.depth > cur.depth || (h.depth == cur.depth && h.splat > cur.splat) {
            w = i;
        }
    }
    w
}

/// The k nearest accepted hits along the ray, sorted by (depth, index).
/// Matches brute-force enumeration exactly: subtrees are skipped only when
/// their entry depth lies strictly beyond the current k-th hit.
pub fn gather_k_hits(
    ray: &Ray,
    env: &[Surfel<f64>],
    bvh: &Bvh,
    settings: &TraceSettings,
) -> Vec<SplatHit> {
    let mut best: Vec<SplatHit> = Vec::with_capacity(settings.k.min(64));
    if bvh.nodes.is_empty() {
        return best;
    }
    let mut stack: Vec<u32> = vec![0];
    while let Some(ni) = stack.pop() {
        let node = &bvh.nodes[ni as usize];
        let Some(entry) = box_entry(ray, &node.lo, &node.hi) else {
            continue;
        };
        if best.len() == settings.k && entry > best[worst_pos(&best)].depth {
            continue;
        }
        if node.count > 0 {
            for &si in &bvh.order[node.start as usize..(node.start + node.count) as usize] {
                let Some(hit) =
                    intersect_ray_splat(ray, &env[si as usize], settings.gaussian_cutoff, si as usize)
                else {
                    continue;
                };
                if best.len() < settings.k {
                    best.push(hit);
                } else {
                    let w = worst_pos(&best);
                    let cur = &best[w];
                    if hit.depth < cur.depth || (hit.depth == cur.depth && hit.splat < cur.splat) {
                        best[w] = hit;
                    }
                }
            }
        } else {
            // Near child last so it pops first.
            let le = box_entry(ray, &bvh.nodes[node.left as usize].lo, &bvh.nodes[node.left as usize].hi);
            let re = box_entry(ray, &bvh.nodes[node.right as usize].lo, &bvh.nodes[node.right as usize].hi);
            match (le, re) {
                (Some(a), Some(b)) if a <= b => {
                    stack.push(node.right);
                    stack.push(node.left);
                }
                (Some(_), Some(_)) => {
                    stack.push(node.left);
                    stack.push(node.right);
                }
                (Some(_), None) => stack.push(node.left),
                (None, Some(_)) => stack.push(node.right),
                (None, None) => {}
            }
        }
    }
    best.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.splat.cmp(&b.splat)));
    best
}

/// Composites gathered hits front to back. Splat appearance is evaluated
/// in the ray direction; the blend weight per hit is base alpha times the
/// Gaussian weight, exactly as in the rasterizer.
fn composite_hits<T: Real>(
    hits: &[SplatHit],
    origin: Vec3<T>,
    dir: Vec3<T>,
    env: &[Surfel<T>],
    settings: &TraceSettings,
) -> ([T; 3], T) {
    if hits.is_empty() {
        return (
            [
                T::lit(settings.miss_color[0]),
                T::lit(settings.miss_color[1]),
                T::lit(settings.miss_color[2]),
            ],
            T::lit(1.0),
        );
    }
    let one = T::lit(1.0);
    let mut trans = one;
    let mut color = [T::lit(0.0); 3];
    for hit in hits {
        if trans.value() < settings.early_stop {
            break;
        }
        let s = &env[hit.splat];
        let h: PlaneHit<T> = if T::TRACKS_GRADIENTS {
            intersect_surfel(origin, dir, s).expect("value path accepted this hit")
        } else {
            PlaneHit {
                u: T::lit(hit.uv[0]),
                v: T::lit(hit.uv[1]),
                t: T::lit(hit.depth),
                weight: T::lit(hit.weight),
                point: Vec3::from_f64(hit.world_point),
            }
        };
        let a = s.alpha * h.weight;
        let w = a * trans;
        let c = eval_sh(&s.sh, dir, s.sh_degree()).expect("stored degree");
        for ch in 0..3 {
            color[ch] = color[ch] + c[ch] * w;
        }
        trans = trans * (one - a);
    }
    (color, trans)
}

/// Traces rays whose geometry itself may carry gradients (reflection
/// origins and directions derive from rendered depth and normals). Hit
/// sets are gathered on the value parts; compositing is generic. `bvh`
/// must have been built from the value snapshot of `env` with the same
/// settings. Returns per-ray color and final transmittance.
pub fn trace_rays<T: Real>(
    origins: &[Vec3<T>],
    dirs: &[Vec3<T>],
    env: &[Surfel<T>],
    bvh: &Bvh,
    settings: &TraceSettings,
) -> Result<(Vec<[T; 3]>, Vec<T>)> {
    settings.check()?;
    if origins.len() != dirs.len() {
        return Err(Error::Dimension {
            msg: format!("{} origins for {} directions", origins.len(), dirs.len()),
        });
    }
    let vals: Vec<Surfel<f64>> = env.iter().map(|s| s.values()).collect();
    let mut colors = Vec::with_capacity(origins.len());
    let mut trans = Vec::with_capacity(origins.len());
    for (&o, &d) in origins.iter().zip(dirs) {
        let ray = Ray::new(o.value(), d.value());
        let hits = gather_k_hits(&ray, &vals, bvh, settings);
        let (c, t) = composite_hits(&hits, o, d, env, settings);
        colors.push(c);
        trans.push(t);
    }
    Ok((colors, trans))
}

/// [`trace_rays`] for plain-value ray batches.
pub fn trace_specular<T: Real>(
    origins: &[Vec3f],
    dirs: &[Vec3f],
    env: &[Surfel<T>],
    bvh: &Bvh,
    settings: &TraceSettings,
) -> Result<(Vec<[T; 3]>, Vec<T>)> {
    let o: Vec<Vec3<T>> = origins.iter().map(|&v| Vec3::from_f64(v)).collect();
    let d: Vec<Vec3<T>> = dirs.iter().map(|&v| Vec3::from_f64(v)).collect();
    trace_rays(&o, &d, env, bvh, settings)
}

/// Value-path tracer parallelized over rays; bit-identical to
/// [`trace_specular`] because rays are independent.
pub fn trace_specular_parallel(
    origins: &[Vec3f],
    dirs: &[Vec3f],
    env: &[Surfel<f64>],
    bvh: &Bvh,
    settings: &TraceSettings,
) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
    settings.check()?;
    if origins.len() != dirs.len() {
        return Err(Error::Dimension {
            msg: format!("{} origins for {} directions", origins.len(), dirs.len()),
        });
    }
    let rays = crate::parallel::map_indexed(origins.len(), |i| {
        let ray = Ray::new(origins[i], dirs[i]);
        let hits = gather_k_hits(&ray, env, bvh, settings);
        composite_hits(&hits, origins[i], dirs[i], env, settings)
    });
    Ok(rays.into_iter().unzip())
}

/// Reference tracer: enumerates every splat with its own plane math, sorts
/// fully, keeps the k nearest, and composites with per-term transmittance
/// products. No BVH anywhere near it.
pub fn brute_force_trace(
    origin: Vec3f,
    dir: Vec3f,
    env: &[Surfel<f64>],
    settings: &TraceSettings,
) -> ([f64; 3], f64) {
    let mut hits: Vec<(f64, usize, f64)> = Vec::new();
    for (i, s) in env.iter().enumerate() {
        let denom = dir.dot(s.t_w);
        if denom.abs() < 1e-12 {
            continue;
        }
        let t = (s.center - origin).dot(s.t_w) / denom;
        if !(t > 0.0 && t < f64::INFINITY) {
            continue;
        }
        let p = origin + dir.scale(t);
        let u = (p - s.center).dot(s.t_u) / s.scale[0];
        let v = (p - s.center).dot(s.t_v) / s.scale[1];
        let weight = (-(u * u + v * v) * 0.5).exp();
        if weight < settings.gaussian_cutoff {
            continue;
        }
        hits.push((t, i, weight));
    }
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    hits.truncate(settings.k);
    if hits.is_empty() {
        return (settings.miss_color, 1.0);
    }
    let mut color = [0.0; 3];
    let mut t_final = 1.0;
    for (n, &(_, i, weight)) in hits.iter().enumerate() {
        let mut trans = 1.0;
        for &(_, j, wj) in &hits[..n] {
            trans *= 1.0 - env[j].alpha * wj;
        }
        if trans < settings.early_stop {
            t_final = trans;
            return (color, t_final);
        }
        let s = &env[i];
        let a = s.alpha * weight;
        let w = a * trans;
        let c = eval_sh(&s.sh, dir, s.sh_degree()).expect("stored degree");
        for ch in 0..3 {
            color[ch] += c[ch] * w;
        }
        t_final = trans * (1.0 - a);
    }
    (color, t_final)
}
