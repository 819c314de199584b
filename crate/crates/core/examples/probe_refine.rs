use planedet_core::pipeline::*;
use planedet_core::math::Vec3;
use planedet_core::render::{render, refine, RefineConfig};
use std::time::Instant;

fn main() {
    let dir = std::env::temp_dir().join("planedet_probe_e2e");
    let config = PipelineConfig::default();
    let scene = planedet_core::synth::SceneSpec::load(&dir.join("scene.toml")).unwrap();
    let planes = planedet_core::render::read_planes_bin(&dir.join("recon/planes.bin")).unwrap();

    let mut views = refine_views(&config, &scene).unwrap();
    for v in &mut views {
        let img = render(&planes, v, config.beta, config.background);
        v.pixels = img.rgb;
    }

    let perturb = |planes: &Vec<planedet_core::render::BoundedPlane>| {
        let mut p = planes.clone();
        let q = &mut p[0];
        let tilt = planedet_core::math::Mat3::rotation_about(Vec3::new(1.0, 0.0, 0.0), 5f64.to_radians());
        q.params.normal = tilt.mul_vec(q.params.normal);
        q.params.offset += 0.1;
        q.params.center = q.params.center - q.params.normal * q.params.signed_distance(q.params.center);
        q.params.axis = (q.params.axis - q.params.normal * q.params.axis.dot(q.params.normal)).normalized().unwrap();
        q.binormal = q.params.binormal();
        p
    };
    let gt = planes[0].params;

    for (lr_n, lr_d, iters) in [(0.02, 0.1, 200)] {
        let cfg = RefineConfig { lr_normal: lr_n, lr_offset: lr_d, iterations: iters, ..Default::default() };
        let t0 = Instant::now();
        let result = refine(&perturb(&planes), &views, &cfg).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        let got = &result.planes[0].params;
        let dd = (got.offset - gt.offset).abs();
        let angle = got.normal.dot(gt.normal).clamp(-1.0, 1.0).acos().to_degrees();
        println!("lr_n={lr_n} lr_d={lr_d} iters={iters}: {dt:.0}s  loss {:.6}->{:.6}  |dd|={dd:.5} angle={angle:.3}",
                 result.trace[0], result.trace.last().unwrap());
    }
}
