// Temporary tuning probe: prints calibrated thresholds and mask IoUs on
// synthetic scenes. Not part of the deliverable surface.

use vipastain::imgutil::StainDomain;
use vipastain::maskextract::{
    calibrate_domain, extract_cd20_masks, extract_he_masks, Channel, CleanParams,
};
use vipastain::synthdata::{generate_pseudo_cd20, generate_pseudo_he, SceneSpec};

fn main() {
    for canvas in [64u32, 128] {
        println!("=== canvas {canvas} ===");
        let spec = |seed| {
            let mut s = SceneSpec::desk_default(canvas, seed);
            s.tls_cluster_count = if canvas >= 128 { 2 } else { 1 };
            s
        };
        let cd20_spec = |seed: u64| {
            let mut s = spec(seed);
            s.nucleus_count = s.nucleus_count / 3;
            s
        };

        // Calibration pool: TLS-rich scenes (dense tissue carries the
        // histogram structure that anchors the boundary thresholds).
        let calib_spec = |seed| {
            let mut s = spec(seed);
            s.tls_cluster_count = 2;
            s
        };
        let he: Vec<_> = (0..8).map(|i| generate_pseudo_he(&calib_spec(1000 + i)).unwrap()).collect();
        let cd: Vec<_> = (0..8)
            .map(|i| {
                let mut s = cd20_spec(2000 + i);
                s.tls_cluster_count = 2;
                generate_pseudo_cd20(&s).unwrap()
            })
            .collect();

        let t0 = std::time::Instant::now();
        let he_thr = calibrate_domain(he.iter().map(|(p, _)| &p.image), StainDomain::He).unwrap();
        let cd_thr = calibrate_domain(cd.iter().map(|(p, _)| &p.image), StainDomain::Cd20).unwrap();
        println!("calibration took {:?}", t0.elapsed());
        for ts in he_thr.sets.iter().chain(&cd_thr.sets) {
            println!(
                "{:>4} {:?}: {:?} working={}",
                ts.domain.as_str(),
                ts.channel,
                ts.thresholds,
                ts.working_threshold()
            );
        }

        let scale = (canvas as f64 / 64.0).powi(2);
        let clean_he = CleanParams {
            min_component_px: (8.0 * scale) as u32,
            fill_holes: false,
        };
        let clean_cd20 = CleanParams {
            min_component_px: (0.05 * (canvas * canvas) as f64) as u32,
            fill_holes: false,
        };

        let mut nuc_ious = vec![];
        let mut rbc_ious = vec![];
        for i in 0..20 {
            let (p, gt) = generate_pseudo_he(&spec(5000 + i)).unwrap();
            let set = extract_he_masks(
                &p.image,
                he_thr.get(Channel::B).unwrap(),
                he_thr.get(Channel::R).unwrap(),
                clean_he,
            )
            .unwrap();
            nuc_ious.push(set.nucleus.unwrap().iou(&gt.nucleus_mask).unwrap());
            rbc_ious.push(set.rbc.unwrap().iou(&gt.rbc_mask).unwrap());
        }
        let mut pos_ious = vec![];
        let mut cdnuc_ious = vec![];
        for i in 0..20 {
            let (p, gt) = generate_pseudo_cd20(&cd20_spec(6000 + i)).unwrap();
            let set = extract_cd20_masks(
                &p.image,
                cd_thr.get(Channel::B).unwrap(),
                cd_thr.get(Channel::G).unwrap(),
                clean_cd20,
            )
            .unwrap();
            let mp = set.positive.unwrap();
            if i < 3 {
                let inter = mp.and(&gt.positive_mask).unwrap().count();
                println!(
                    "  cd20 patch {i}: |pred|={} |gt|={} |inter|={}",
                    mp.count(),
                    gt.positive_mask.count(),
                    inter
                );
            }
            pos_ious.push(mp.iou(&gt.positive_mask).unwrap());
            cdnuc_ious.push(set.nucleus.unwrap().iou(&gt.nucleus_mask).unwrap());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "HE  nucleus IoU mean {:.3} min {:.3} | rbc IoU mean {:.3} min {:.3}",
            mean(&nuc_ious),
            min(&nuc_ious),
            mean(&rbc_ious),
            min(&rbc_ious)
        );
        println!(
            "CD20 positive IoU mean {:.3} min {:.3} | nucleus IoU mean {:.3}",
            mean(&pos_ious),
            min(&pos_ious),
            mean(&cdnuc_ious)
        );
    }
}
