//! Scratch diagnostics: dump the selection trace for one eval scene.
//! Usage: probe <checkpoint> <task> [seed] [episode]

use bracepoint::{
    affordance_map, displacement_oracle, generate_scene_cfg, gt_score, propose_decode,
    proposal_condition, scene_features, score_action, select_best, topk_candidates, SeedState,
    SupportAction, TaskType,
};

fn oracle_r(scene: &bracepoint::SceneInstance, p: usize, d: [f64; 3]) -> (f64, f64) {
    let a = SupportAction::new(p, d).unwrap();
    let (m, _, gd) = displacement_oracle(scene, Some(&a)).unwrap();
    let ph = &scene.physics;
    (m, gt_score(m / (2.0 * ph.epsilon), 1.0 - gd, 1.0, 1.0))
}

fn neg(v: [f64; 3]) -> [f64; 3] {
    [-v[0], -v[1], -v[2]]
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = &args[1];
    let task: TaskType = args[2].parse().unwrap();
    let seed: u64 = args.get(3).map_or(1, |s| s.parse().unwrap());
    let ep: u64 = args.get(4).map_or(0, |s| s.parse().unwrap());

    let (w, _tc) = bracepoint::load_checkpoint(std::path::Path::new(ckpt)).unwrap();
    let ep_seed = SeedState::new(seed, 0).derive(ep);
    let scene = generate_scene_cfg(task, ep_seed.derive(0), 192, None).unwrap();
    let feats = scene_features(&scene, &w).unwrap();
    let cfg = w.config.clone();

    let (m0, _, _) = displacement_oracle(&scene, None).unwrap();
    println!(
        "scene: op point {} label {} pos {:?} wrench F {:?}; baseline m {:.4}",
        scene.p_op,
        scene.cloud.part_label[scene.p_op],
        scene.cloud.positions[scene.p_op],
        scene.op_wrench.force,
        m0
    );

    // Oracle view: best base points when pressing along the inward normal.
    let mut by_r: Vec<(usize, f64, f64)> = (0..scene.cloud.len())
        .filter(|&p| scene.cloud.part_label[p] == 0)
        .map(|p| {
            let (m, r) = oracle_r(&scene, p, neg(scene.cloud.normals[p]));
            (p, m, r)
        })
        .collect();
    by_r.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    println!("\noracle top 10 (press -normal):");
    for &(p, m, r) in by_r.iter().take(10) {
        println!(
            "  p {:3} pos {:?} n {:?} m {:.4} r {:.3}",
            p, scene.cloud.positions[p], scene.cloud.normals[p], m, r
        );
    }
    let n_support = by_r.iter().filter(|t| t.2 > 0.5).count();
    println!("  base points with r > 0.5: {n_support}");

    // Model view: affordance map, no context.
    let map = affordance_map(&scene, &feats, None, &w).unwrap();
    let cands = topk_candidates(&map, 10).unwrap();
    println!("\nmodel top 10 affordance points:");
    let sel_seed = ep_seed.derive(1).derive(10);
    for (rank, &p) in cands.iter().enumerate() {
        let (mo, ro) = oracle_r(&scene, p, neg(scene.cloud.normals[p]));
        println!(
            "  rank {rank} p {:3} label {} map {:.3} pos {:?} n {:?} | -n press: m {:.4} r {:.3}",
            p,
            scene.cloud.part_label[p],
            map[p],
            scene.cloud.positions[p],
            scene.cloud.normals[p],
            mo,
            ro
        );
        // Decode the first few proposals exactly as selection does.
        let cond = proposal_condition(&scene, &feats, p, None, &w).unwrap();
        let f_sp = bracepoint::encode_small(
            &scene.cloud.positions[p],
            bracepoint::SmallRole::Sp,
            &w.enc_scoring,
        )
        .unwrap();
        let f_op = bracepoint::encode_small(
            &scene.cloud.positions[scene.p_op],
            bracepoint::SmallRole::Op,
            &w.enc_scoring,
        )
        .unwrap();
        let mut rng = sel_seed.derive(rank as u64).rng();
        let mut z = vec![0.0; cfg.latent_dim];
        for s in 0..4 {
            rng.fill_gaussian(&mut z);
            let d = propose_decode(&z, &cond, &w.heads).unwrap();
            let f_d =
                bracepoint::encode_small(&d, bracepoint::SmallRole::Dir, &w.enc_scoring).unwrap();
            let c = score_action(
                feats.scoring_rows.row(scene.p_op),
                feats.scoring_rows.row(p),
                &f_op,
                &f_sp,
                &f_d,
                &w.heads.no_context,
                &w.heads,
                &cfg,
            )
            .unwrap();
            let dot = -(d[0] * scene.cloud.normals[p][0]
                + d[1] * scene.cloud.normals[p][1]
                + d[2] * scene.cloud.normals[p][2]);
            let valid = scene.cloud.part_label[p] == 0
                && dot >= (std::f64::consts::FRAC_PI_4).cos();
            let (mo, ro) = oracle_r(&scene, p, d);
            println!(
                "      z{s}: d [{:+.2} {:+.2} {:+.2}] score {:.3} dot(-n) {:+.2} valid {} m {:.4} r {:.3}",
                d[0], d[1], d[2], c, dot, valid, mo, ro
            );
        }
    }

    let (act, c) = select_best(&scene, &map, 10, 100, sel_seed, &w, None, &feats).unwrap();
    let dot = -(act.d[0] * scene.cloud.normals[act.p_sp][0]
        + act.d[1] * scene.cloud.normals[act.p_sp][1]
        + act.d[2] * scene.cloud.normals[act.p_sp][2]);
    let (mo, ro) = oracle_r(&scene, act.p_sp, act.d);
    println!(
        "\nselect_best -> p {} label {} d [{:+.2} {:+.2} {:+.2}] c {:.3} dot(-n) {:+.2} m {:.4} r {:.3}",
        act.p_sp,
        scene.cloud.part_label[act.p_sp],
        act.d[0],
        act.d[1],
        act.d[2],
        c,
        dot,
        mo,
        ro
    );
}
