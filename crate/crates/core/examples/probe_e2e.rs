use planedet_core::pipeline::*;
use std::time::Instant;

fn main() {
    let dir = std::env::temp_dir().join("planedet_probe_e2e");
    let _ = std::fs::remove_dir_all(&dir);
    let config = PipelineConfig::default();
    let t0 = Instant::now();
    cmd_generate(&config, &dir).unwrap();
    let t1 = Instant::now();
    println!("generate: {:.1}s", (t1 - t0).as_secs_f64());
    let recon = cmd_reconstruct(&config, &dir).unwrap();
    let t2 = Instant::now();
    println!("reconstruct: {:.1}s, instances = {}, planes = {}", (t2 - t1).as_secs_f64(),
             recon.state.instances.len(), recon.planes.len());
    for inst in &recon.state.instances {
        println!("  instance {}: {} voxels, n = ({:.3},{:.3},{:.3}), d = {:.4}",
            inst.id, inst.mask.len(), inst.params.normal.x, inst.params.normal.y,
            inst.params.normal.z, inst.params.offset);
    }
    println!("fragment mask-cls losses: {:?}", recon.fragment_losses);
    // Per-instance IoU vs GT voxel masks.
    let gt = planedet_core::synth::read_gt_voxels(&dir.join("gt_voxels.txt")).unwrap();
    let mut gt_masks: std::collections::BTreeMap<u32, std::collections::BTreeSet<[i32;3]>> = Default::default();
    for v in &gt.voxels { gt_masks.entry(v.instance).or_default().insert(v.coord); }
    let mut gt_cls: std::collections::BTreeMap<u32, std::collections::BTreeSet<[i32;3]>> = Default::default();
    for v in &gt.voxels {
        if recon.classifiable.contains(&v.coord) {
            gt_cls.entry(v.instance).or_default().insert(v.coord);
        }
    }
    for inst in &recon.state.instances {
        let mask: std::collections::BTreeSet<[i32;3]> = inst.mask.iter().copied().collect();
        let (gid, gt_mask) = gt_masks.iter().max_by_key(|(_, m)| m.intersection(&mask).count()).unwrap();
        let inter = gt_mask.intersection(&mask).count();
        let union = gt_mask.union(&mask).count();
        let cls = &gt_cls[gid];
        let inter_c = cls.intersection(&mask).count();
        let union_c = cls.union(&mask).count();
        println!("  inst {} ~ gt {}: IoU raw = {:.4}, classifiable = {:.4}", inst.id, gid,
                 inter as f64/union as f64, inter_c as f64/union_c as f64);
    }
    let (geo, seg) = cmd_eval(&config, &dir, false).unwrap();
    let t3 = Instant::now();
    println!("eval: {:.1}s", (t3 - t2).as_secs_f64());
    println!("{geo}");
    println!("{seg}");
    println!("total: {:.1}s", (t3 - t0).as_secs_f64());
}
