//! Baseline support generators: a uniform sampler over the whole cloud and a
//! band-restricted sampler, both pressing along the inward normal with a
//! seeded angular perturbation.

use crate::geometry::{quat, vec3, Prng, SeedState, Vec3};

use super::scenes::{SceneInstance, SupportAction};

pub const RANDOM_PERTURB_CAP: f64 = 30.0 * std::f64::consts::PI / 180.0;
pub const HEURISTIC_PERTURB_CAP: f64 = 10.0 * std::f64::consts::PI / 180.0;

/// Rotates `d0` by an angle up to `cap` about a uniformly drawn orthogonal
/// axis. Two uniform draws, axis angle then tilt, in that order.
fn perturb_direction(d0: Vec3, cap: f64, rng: &mut Prng) -> Vec3 {
    let t1 = vec3::any_orthogonal(d0);
    let t2 = vec3::cross(d0, t1);
    let spin = rng.range(0.0, std::f64::consts::TAU);
    let axis = vec3::add(vec3::scale(t1, spin.cos()), vec3::scale(t2, spin.sin()));
    let tilt = rng.range(0.0, cap.max(0.0));
    if tilt == 0.0 {
        return d0;
    }
    let d = quat::rotate(quat::from_axis_angle(axis, tilt), d0);
    vec3::unit(d, 1e-12).expect("rotation preserves length")
}

/// Uniform support point over the whole cloud, pressing along the inward
/// normal perturbed by up to `cap` radians.
pub fn random_support_capped(scene: &SceneInstance, seed: SeedState, cap: f64) -> SupportAction {
    let mut rng = seed.rng();
    let p_sp = rng.index(scene.cloud.len());
    let inward = vec3::scale(scene.cloud.normals[p_sp], -1.0);
    let d = perturb_direction(inward, cap, &mut rng);
    SupportAction::new(p_sp, d).expect("perturbed inward normal is unit length")
}

pub fn random_support(scene: &SceneInstance, seed: SeedState) -> SupportAction {
    random_support_capped(scene, seed, RANDOM_PERTURB_CAP)
}

/// Support point drawn uniformly from the scene's stable band, pressing along
/// the inward normal perturbed by up to `cap` radians.
pub fn heuristic_support_capped(scene: &SceneInstance, seed: SeedState, cap: f64) -> SupportAction {
    assert!(!scene.heuristic_region.is_empty(), "scene invariant: band is non-empty");
    let mut rng = seed.rng();
    let p_sp = scene.heuristic_region[rng.index(scene.heuristic_region.len())];
    let inward = vec3::scale(scene.cloud.normals[p_sp], -1.0);
    let d = perturb_direction(inward, cap, &mut rng);
    SupportAction::new(p_sp, d).expect("perturbed inward normal is unit length")
}

pub fn heuristic_support(scene: &SceneInstance, seed: SeedState) -> SupportAction {
    heuristic_support_capped(scene, seed, HEURISTIC_PERTURB_CAP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::oracle::step_episode;
    use crate::env::scenes::{generate_scene, TaskType};

    #[test]
    fn zero_cap_returns_exact_inward_normal() {
        let scene = generate_scene(TaskType::Push, SeedState::new(4, 8), 192).unwrap();
        let act = random_support_capped(&scene, SeedState::new(9, 1), 0.0);
        let inward = vec3::scale(scene.cloud.normals[act.p_sp], -1.0);
        assert_eq!(act.d, inward);
    }

    #[test]
    fn samplers_replay_under_same_seed() {
        let scene = generate_scene(TaskType::Pick, SeedState::new(2, 8), 192).unwrap();
        let seed = SeedState::new(31, 7);
        assert_eq!(random_support(&scene, seed), random_support(&scene, seed));
        assert_eq!(heuristic_support(&scene, seed), heuristic_support(&scene, seed));
    }

    #[test]
    fn perturbation_stays_under_cap() {
        let scene = generate_scene(TaskType::Screw, SeedState::new(6, 8), 192).unwrap();
        for k in 0..200 {
            let act = random_support(&scene, SeedState::new(50, k));
            let inward = vec3::scale(scene.cloud.normals[act.p_sp], -1.0);
            let angle = vec3::dot(act.d, inward).clamp(-1.0, 1.0).acos();
            assert!(angle <= RANDOM_PERTURB_CAP + 1e-9);
        }
    }

    #[test]
    fn heuristic_stays_in_band() {
        let scene = generate_scene(TaskType::Pull, SeedState::new(12, 8), 256).unwrap();
        for k in 0..100 {
            let act = heuristic_support(&scene, SeedState::new(60, k));
            assert!(scene.heuristic_region.contains(&act.p_sp));
        }
    }

    #[test]
    fn random_point_histogram_is_uniform() {
        // Aggregate chi-square over all points against the flat multinomial;
        // the statistic concentrates at N-1 with variance 2(N-1).
        let scene = generate_scene(TaskType::Screw, SeedState::new(1, 8), 200).unwrap();
        let n = scene.cloud.len();
        let draws = 10_000usize;
        let mut hist = vec![0usize; n];
        for k in 0..draws {
            hist[random_support(&scene, SeedState::new(123, k as u64)).p_sp] += 1;
        }
        let expected = draws as f64 / n as f64;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        let df = (n - 1) as f64;
        let sigma = (2.0 * df).sqrt();
        assert!(
            (chi2 - df).abs() <= 3.0 * sigma,
            "chi-square {chi2} strays beyond 3 sigma of {df}"
        );
    }

    fn single_draw_success(scene: &SceneInstance, act: &SupportAction) -> bool {
        let mut scene = scene.clone();
        let mut success = false;
        for _ in 0..scene.physics.steps_to_goal {
            let (next, _, result) = step_episode(&scene, act).unwrap();
            scene = next;
            success = result.success;
        }
        success
    }

    #[test]
    fn heuristic_beats_random_by_twenty_points_on_screw() {
        let mut rand_wins = 0usize;
        let mut heur_wins = 0usize;
        let trials = 100u64;
        for s in 0..trials {
            let scene = generate_scene(TaskType::Screw, SeedState::new(s, 90), 256).unwrap();
            let draw_seed = SeedState::new(s, 91);
            if single_draw_success(&scene, &random_support(&scene, draw_seed)) {
                rand_wins += 1;
            }
            if single_draw_success(&scene, &heuristic_support(&scene, draw_seed)) {
                heur_wins += 1;
            }
        }
        let gap = heur_wins as i64 - rand_wins as i64;
        assert!(
            gap >= 20,
            "heuristic {heur_wins}/100 vs random {rand_wins}/100: gap {gap} below 20 points"
        );
    }
}
