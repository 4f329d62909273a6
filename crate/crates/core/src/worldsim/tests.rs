use proptest::prelude::*;

use super::*;

fn free_ball(pos: [f64; 2], vel: [f64; 2], radius: f64) -> Ball {
    Ball { pos, vel, radius, fixed: false }
}

#[test]
fn free_flight_example() {
    let mut balls = [free_ball([24.0, 24.0], [1.0, 0.0], 3.0)];
    step_balls(&mut balls, 48.0);
    assert_eq!(balls[0].pos, [25.0, 24.0]);
}

#[test]
fn wall_reflection_example() {
    let mut balls = [free_ball([45.0, 24.0], [2.0, 0.0], 2.0)];
    step_balls(&mut balls, 48.0);
    // brute force: unreflected x = 47, contact line at 46, mirrored to 45
    let unreflected = 45.0 + 2.0;
    let contact = 48.0 - 2.0;
    assert_eq!(balls[0].pos, [contact - (unreflected - contact), 24.0]);
    assert_eq!(balls[0].vel, [-2.0, 0.0]);
}

#[test]
fn fixed_ball_never_moves() {
    let cfg = WorldConfig::default();
    let traj = simulate(4, 300, 5, &cfg).unwrap();
    let first = traj[0].iter().find(|b| b.fixed).unwrap();
    let last = traj[299].iter().find(|b| b.fixed).unwrap();
    assert_eq!(first, last);
    assert_eq!(first.pos, [24.0, 24.0]);
}

#[test]
fn fixed_ball_reflects_approaching_ball() {
    let mut balls = [
        Ball { pos: [24.0, 24.0], vel: [0.0, 0.0], radius: 4.0, fixed: true },
        free_ball([17.5, 24.0], [1.0, 0.0], 3.0),
    ];
    step_balls(&mut balls, 48.0);
    assert_eq!(balls[1].vel, [-1.0, 0.0]);
    assert_eq!(balls[0].pos, [24.0, 24.0]);
}

#[test]
fn head_on_collision_exchanges_velocities() {
    let mut balls = [free_ball([20.0, 10.0], [1.0, 0.0], 3.0), free_ball([26.5, 10.0], [-1.0, 0.0], 3.0)];
    step_balls(&mut balls, 48.0);
    assert_eq!(balls[0].vel, [-1.0, 0.0]);
    assert_eq!(balls[1].vel, [1.0, 0.0]);
}

#[test]
fn wall_reflections_conserve_speed() {
    let cfg = WorldConfig { central_radius: None, ..WorldConfig::default() };
    for seed in 0..20 {
        let traj = simulate(1, 2_000, seed, &cfg).unwrap();
        let s0 = traj[0][0].speed();
        for state in &traj {
            assert!((state[0].speed() - s0).abs() < 1e-9);
        }
    }
}

#[test]
fn balls_stay_in_the_box_and_move_at_bounded_speed() {
    let cfg = WorldConfig::default();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut balls = initial_balls(6, &cfg, &mut rng).unwrap();
        let bound = balls.iter().map(|b| b.speed().powi(2)).sum::<f64>().sqrt();
        for _ in 0..10_000 {
            let before = balls.clone();
            step_balls(&mut balls, cfg.size);
            for (b, p) in balls.iter().zip(&before) {
                assert!(b.pos.iter().all(|&v| v >= b.radius && v <= cfg.size - b.radius));
                let moved = (b.pos[0] - p.pos[0]).hypot(b.pos[1] - p.pos[1]);
                assert!(moved <= bound + 1e-9, "moved {moved} > {bound}");
            }
        }
    }
}

#[test]
fn ball_density_is_a_minority_class() {
    let cfg = WorldConfig::default();
    for n in 1..=6 {
        for seed in 0..5 {
            for state in simulate(n, 50, seed, &cfg).unwrap() {
                let f = render(&state).lit_fraction();
                assert!(f > 0.0 && f < 0.5, "{n} balls: density {f}");
            }
        }
    }
}

#[test]
fn invalid_world_is_rejected() {
    let cfg = WorldConfig { radius: 23.0, ..WorldConfig::default() };
    assert!(matches!(simulate(1, 3, 0, &cfg), Err(Error::Config(_))));
    assert!(simulate(0, 3, 0, &WorldConfig::default()).is_err());
}

#[test]
fn render_examples() {
    assert!(render(&[]).pixels().iter().all(|&p| p == 0));

    let tiny = free_ball([10.5, 7.5], [0.0, 0.0], 0.5);
    let f = render(&[tiny]);
    for i in 0..FRAME {
        for j in 0..FRAME {
            let (dx, dy) = (j as f64 + 0.5 - 10.5, i as f64 + 0.5 - 7.5);
            let want = (dx * dx + dy * dy <= 0.25) as u8;
            assert_eq!(f.get(i, j), want);
        }
    }
    assert_eq!(f.pixels().iter().map(|&p| p as usize).sum::<usize>(), 1);
    assert_eq!(f.get(7, 10), 1);

    let a = free_ball([8.0, 8.0], [0.0, 0.0], 3.0);
    let b = free_ball([30.0, 35.0], [0.0, 0.0], 3.0);
    let both = render(&[a, b]);
    let (fa, fb) = (render(&[a]), render(&[b]));
    for k in 0..FRAME_PIXELS {
        assert_eq!(both.pixels()[k], fa.pixels()[k] | fb.pixels()[k]);
    }
}

#[test]
fn crop_window_arithmetic() {
    let mut f = Frame::default();
    f.set(0, 0, true);
    f.set(10, 10, true);
    f.set(11, 11, true);
    let c = f.crop([5, 5]);
    assert_eq!(c.len(), CROP_PIXELS);
    assert_eq!(c[0], 1.0);
    assert_eq!(c[CROP_PIXELS - 1], 1.0);
    assert_eq!(c.iter().sum::<f64>(), 2.0);
    let far = f.crop([CENTER_MAX, CENTER_MAX]);
    assert_eq!(far.len(), CROP_PIXELS);
}

#[test]
fn ten_disjoint_crops_cover_about_half_the_frame() {
    let coverage = 10.0 * CROP_PIXELS as f64 / FRAME_PIXELS as f64;
    assert!((coverage - 0.525_173_6).abs() < 1e-6);
}

#[test]
fn views_are_reproducible_and_in_range() {
    let frame = render(&simulate(3, 1, 2, &WorldConfig::default()).unwrap()[0]);
    let draw = || sample_views(&frame, 10, &mut ChaCha8Rng::seed_from_u64(4));
    let (a, b) = (draw(), draw());
    assert_eq!(a, b);
    for (c, crop) in &a {
        assert!(c.iter().all(|v| (CENTER_MIN..=CENTER_MAX).contains(v)));
        assert_eq!(*crop, frame.crop(*c));
    }
    assert!(sample_views(&frame, 0, &mut ChaCha8Rng::seed_from_u64(4)).is_empty());
}

#[test]
fn episode_crops_match_frames() {
    let ep = Episode::generate(3, 6, 10, 77, &WorldConfig::default()).unwrap();
    for t in 0..ep.len() {
        let obs = ep.observations(t);
        for (a, c) in ep.centers[t].iter().enumerate() {
            assert_eq!(obs.crop(a), ep.frames[t].crop(*c).as_slice());
            assert_eq!(obs.centers()[a], center_position(*c));
        }
    }
}

#[test]
fn pack_round_trips() {
    let ep = Episode::generate(5, 4, 0, 3, &WorldConfig::default()).unwrap();
    for f in &ep.frames {
        assert_eq!(Frame::unpack(&f.pack()), *f);
    }
}

fn header(n_seq: usize, frames: usize, seed: u64) -> DatasetHeader {
    DatasetHeader { n_seq, frames, views: 10, n_balls: 3, seed }
}

#[test]
fn dataset_round_trip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let h = header(7, 5, 99);
    let cfg = WorldConfig::default();
    generate_dataset(&path, &h, &cfg).unwrap();
    let ds = Dataset::load(&path).unwrap();
    assert_eq!(*ds.header(), h);
    for i in 0..7 {
        let ep = ds.episode(i).unwrap();
        assert_eq!(ep, Episode::generate(3, 5, 10, splitmix(99, i as u64), &cfg).unwrap());
    }
    let again = dataset_bytes(&h, &cfg).unwrap();
    assert_eq!(again, fs::read(&path).unwrap());
    assert!(ds.episode(7).is_err());
}

#[test]
fn desk_dataset_header_reports_counts() {
    let bytes = dataset_bytes(&header(500, 30, 7), &WorldConfig::default()).unwrap();
    let ds = Dataset::from_bytes(bytes).unwrap();
    assert_eq!(ds.len(), 500);
    assert_eq!(ds.header().frames, 30);
    assert_eq!(ds.episode(499).unwrap().len(), 30);
}

#[test]
fn corrupt_files_report_offsets() {
    let good = dataset_bytes(&header(2, 3, 1), &WorldConfig::default()).unwrap();
    let offset = |bytes: Vec<u8>| match Dataset::from_bytes(bytes) {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    };
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert_eq!(offset(bad_magic), 0);
    let mut bad_version = good.clone();
    bad_version[8] = 9;
    assert_eq!(offset(bad_version), 8);
    let cut = good.len() - 5;
    assert_eq!(offset(good[..cut].to_vec()), cut as u64);
    assert_eq!(offset(good[..20].to_vec()), 20);
    let mut long = good.clone();
    long.push(0);
    assert_eq!(offset(long), good.len() as u64);
    let mut bad_center = good.clone();
    let at = good.len() - 4;
    bad_center[at] = 200;
    assert_eq!(offset(bad_center), at as u64);
}

#[test]
fn per_sequence_seeds_are_distinct() {
    let seeds: std::collections::HashSet<u64> = (0..10_000).map(|i| splitmix(7, i)).collect();
    assert_eq!(seeds.len(), 10_000);
    assert_ne!(splitmix(7, 0), splitmix(8, 0));
}

proptest! {
    #[test]
    fn single_ball_reflections_preserve_speed(x in 3.0f64..45.0, y in 3.0f64..45.0, vx in -2.0f64..2.0, vy in -2.0f64..2.0) {
        let mut balls = [free_ball([x, y], [vx, vy], 3.0)];
        let s0 = balls[0].speed();
        for _ in 0..200 {
            step_balls(&mut balls, 48.0);
            prop_assert!((balls[0].speed() - s0).abs() < 1e-9);
            prop_assert!(balls[0].pos.iter().all(|&v| (3.0..=45.0).contains(&v)));
        }
    }
}
