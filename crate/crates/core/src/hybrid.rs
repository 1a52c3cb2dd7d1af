//! Full-pipeline rendering: rasterized diffuse buffers, reflection rays
//! spawned from rendered depth and normals, traced specular color, and the
//! per-pixel blend C = (1 - alpha_spec) * C_diffuse + alpha_spec * C_spec.
//!
//! Pixels at or below the alpha mask threshold never trace; their final
//! color is the diffuse buffer verbatim (which already holds the
//! background where nothing rendered).

use crate::autodiff::Real;
use crate::deform::deform_scene;
use crate::env_tracer::{
    brute_force_trace, build_bvh, trace_rays, trace_specular_parallel, TraceSettings,
};
use crate::image::ImageRgb;
use crate::math::Vec3;
use crate::rasterizer::{oracle_render, render, render_parallel, Buffers, RenderBuffers, RenderSettings};
use crate::scene::{Camera, Scene};
use crate::splat_math::{reflect, Surfel};
use crate::Result;

pub struct HybridBuffers<T> {
    pub raster: Buffers<T>,
    /// Traced reflection color; the trace miss color where unmasked.
    pub specular: Vec<[T; 3]>,
    /// Blended output. Equals `raster.diffuse` wherever `mask` is false.
    pub final_color: Vec<[T; 3]>,
    /// True where accumulated alpha cleared the mask threshold and a
    /// reflection ray was traced.
    pub mask: Vec<bool>,
}

fn blend<T: Real>(alpha_spec: T, diffuse: [T; 3], spec: [T; 3]) -> [T; 3] {
    let rest = T::lit(1.0) - alpha_spec;
    [
        rest * diffuse[0] + alpha_spec * spec[0],
        rest * diffuse[1] + alpha_spec * spec[1],
        rest * diffuse[2] + alpha_spec * spec[2],
    ]
}

/// Reflection ray for one masked pixel, from its camera ray and the
/// rendered depth/normal. The origin steps `self_offset` along the normal
/// off the reflecting surface; a degenerate zero normal reflects nothing
/// and lets the ray continue straight.
fn reflection_ray<T: Real>(
    camera: &Camera,
    px: usize,
    py: usize,
    depth: T,
    normal: Vec3<T>,
    self_offset: f64,
) -> (Vec3<T>, Vec3<T>) {
    let ray = camera.ray_through(px as f64 + 0.5, py as f64 + 0.5);
    let o = Vec3::from_f64(ray.origin);
    let d = Vec3::from_f64(ray.dir);
    let point = o + d.mul_s(depth);
    let origin = point + normal.mul_s(T::lit(self_offset));
    (origin, reflect(d, normal))
}

/// Renders main splats, traces reflections off masked pixels into the
/// environment set, and blends. Differentiable end to end: reflection
/// geometry carries gradients from the depth and normal buffers.
pub fn render_hybrid_buffers<T: Real>(
    main: &[Surfel<T>],
    env: &[Surfel<T>],
    camera: &Camera,
    render_settings: &RenderSettings,
    trace_settings: &TraceSettings,
) -> Result<HybridBuffers<T>> {
    let raster = render(main, camera, render_settings)?;
    let n = raster.width * raster.height;
    let mut mask = vec![false; n];
    let mut origins = Vec::new();
    let mut dirs = Vec::new();
    let mut traced_at = Vec::new();
    for i in 0..n {
        if raster.alpha[i].value() > render_settings.alpha_mask_threshold {
            mask[i] = true;
            let (o, d) = reflection_ray(
                camera,
                i % raster.width,
                i / raster.width,
                raster.depth[i],
                raster.normal[i],
                trace_settings.self_offset,
            );
            origins.push(o);
            dirs.push(d);
            traced_at.push(i);
        }
    }
    let env_vals: Vec<Surfel<f64>> = env.iter().map(|s| s.values()).collect();
    let bvh = build_bvh(&env_vals, trace_settings);
    let (spec_colors, _) = trace_rays(&origins, &dirs, env, &bvh, trace_settings)?;
    let miss = [
        T::lit(trace_settings.miss_color[0]),
        T::lit(trace_settings.miss_color[1]),
        T::lit(trace_settings.miss_color[2]),
    ];
    let mut specular = vec![miss; n];
    let mut final_color = raster.diffuse.clone();
    for (r, &i) in traced_at.iter().enumerate() {
        specular[i] = spec_colors[r];
        final_color[i] = blend(raster.alpha_spec[i], raster.diffuse[i], spec_colors[r]);
    }
    Ok(HybridBuffers {
        raster,
        specular,
        final_color,
        mask,
    })
}

pub struct HybridRender {
    pub image: ImageRgb,
    pub buffers: RenderBuffers,
    pub specular: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
}

/// Scene-level entry point: deform both splat sets to time `t`, render,
/// trace, blend. Value-only and parallel over pixels and rays.
pub fn render_hybrid(
    scene: &Scene,
    t: f64,
    camera: &Camera,
    render_settings: &RenderSettings,
    trace_settings: &TraceSettings,
) -> Result<HybridRender> {
    let (main, env) = deform_scene(scene, t)?;
    let buffers = render_parallel(&main, camera, render_settings)?;
    let n = buffers.width * buffers.height;
    let mut mask = vec![false; n];
    let mut origins = Vec::new();
    let mut dirs = Vec::new();
    let mut traced_at = Vec::new();
    for i in 0..n {
        if buffers.alpha[i] > render_settings.alpha_mask_threshold {
            mask[i] = true;
            let (o, d) = reflection_ray(
                camera,
                i % buffers.width,
                i / buffers.width,
                buffers.depth[i],
                buffers.normal[i],
                trace_settings.self_offset,
            );
            origins.push(o);
            dirs.push(d);
            traced_at.push(i);
        }
    }
    let bvh = build_bvh(&env, trace_settings);
    let (spec_colors, _) = trace_specular_parallel(&origins, &dirs, &env, &bvh, trace_settings)?;
    let mut specular = vec![trace_settings.miss_color; n];
    let mut final_color = buffers.diffuse.clone();
    for (r, &i) in traced_at.iter().enumerate() {
        specular[i] = spec_colors[r];
        final_color[i] = blend(buffers.alpha_spec[i], buffers.diffuse[i], spec_colors[r]);
    }
    Ok(HybridRender {
        image: ImageRgb {
            width: buffers.width,
            height: buffers.height,
            data: final_color,
        },
        buffers,
        specular,
        mask,
    })
}

/// End-to-end reference: per-pixel exhaustive rasterization, brute-force
/// reflection tracing with k = environment size and no early stop, and the
/// same blend. No tiles, no BVH, nothing shared with the fast compositor.
pub fn oracle_render_hybrid(
    scene: &Scene,
    t: f64,
    camera: &Camera,
    render_settings: &RenderSettings,
    trace_settings: &TraceSettings,
) -> Result<HybridRender> {
    let (main, env) = deform_scene(scene, t)?;
    let rs = RenderSettings {
        early_stop: 0.0,
        ..render_settings.clone()
    };
    let ts = TraceSettings {
        k: env.len().max(1),
        early_stop: 0.0,
        ..trace_settings.clone()
    };
    let buffers = oracle_render(&main, camera, &rs)?;
    let n = buffers.width * buffers.height;
    let mut mask = vec![false; n];
    let mut specular = vec![ts.miss_color; n];
    let mut final_color = buffers.diffuse.clone();
    for i in 0..n {
        if buffers.alpha[i] <= rs.alpha_mask_threshold {
            continue;
        }
        mask[i] = true;
        let ray = camera.ray_through((i % buffers.width) as f64 + 0.5, (i / buffers.width) as f64 + 0.5);
        let nrm = buffers.normal[i];
        let point = ray.origin + ray.dir.scale(buffers.depth[i]);
        let origin = point + nrm.scale(ts.self_offset);
        let dir = ray.dir - nrm.scale(2.0 * ray.dir.dot(nrm));
        let (c, _) = brute_force_trace(origin, dir, &env, &ts);
        specular[i] = c;
        let a = buffers.alpha_spec[i];
        for ch in 0..3 {
            final_color[i][ch] = (1.0 - a) * buffers.diffuse[i][ch] + a * c[ch];
        }
    }
    Ok(HybridRender {
        image: ImageRgb {
            width: buffers.width,
            height: buffers.height,
            data: final_color,
        },
        buffers,
        specular,
        mask,
    })
}
