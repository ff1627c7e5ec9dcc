use agf_core::compare::{probe_curve, Tolerances};
use agf_core::models::attn::AttnProblem;
use agf_core::models::dln::{dln_sequence, DlnProblem};
use agf_core::models::fcln::FclnProblem;
use agf_core::models::modadd::ModAddProblem;
use agf_core::numerics::StepControl;
use agf_core::plateau::{extract, PlateauParams};
use agf_core::sequence::{PredictedSequence, PredictedStep};
use agf_core::*;
use proptest::prelude::*;

fn step(k: usize, loss: f64, tau: Option<f64>) -> PredictedStep {
    PredictedStep { k, loss, tau, tau_lower_bound: None, feature: String::new(), value: 0.0 }
}

fn staircase(levels: &[f64], drops: &[f64], t_end: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let times: Vec<f64> = (0..=n).map(|i| t_end * i as f64 / n as f64).collect();
    let losses = times.iter().map(|&t| levels[drops.iter().filter(|&&d| t >= d).count()]).collect();
    (times, losses)
}

#[test]
fn losses_are_non_increasing() {
    let dln = DlnProblem::two_coordinate(1e-4);
    let fc = FclnProblem::diagonal(&[3.0, 2.0, 1.0], 3, 1e-4).unwrap();
    let attn = AttnProblem::diagonal(&[2.0, 1.0], 8, 4, 1e-2).unwrap();
    let modadd = ModAddProblem::from_spectrum(7, &[(1, 3.0, 0.4), (2, 1.5, -1.1)], 6, 1e-2).unwrap();
    let runs = [
        gf_train(&dln, &GfConfig::new(1e-4, 0, 3.0)).unwrap(),
        gf_train(&fc, &GfConfig::new(1e-4, 0, 2.0)).unwrap(),
        gf_train(&attn, &GfConfig::new(1e-2, 0, 0.5)).unwrap(),
        gf_train(&modadd, &GfConfig::new(1e-2, 0, 2.0)).unwrap(),
    ];
    for run in &runs {
        assert!(run.max_uptick() < 1e-10, "uptick {:e}", run.max_uptick());
        assert!(run.losses.last().unwrap() < &run.losses[0]);
        assert!((run.raw_times.last().unwrap() - run.eta * run.times.last().unwrap()).abs() < 1e-9);
    }
}

#[test]
fn dln_two_plateaus_at_small_alpha() {
    let alpha = 1e-6;
    let prob = DlnProblem::two_coordinate(alpha);
    let run = gf_train(&prob, &GfConfig::new(alpha, 0, 3.0)).unwrap();
    let report = plateau_extract(&run, 2);
    assert_eq!(report.mismatch, None, "{:?}", report.levels());
    let levels = report.levels();
    for (m, p) in levels.iter().zip([1.25, 0.25]) {
        assert!((m - p).abs() <= 0.05 * p, "{m} vs {p}");
    }
    assert!(levels[2] < 1e-3);
    for (m, p) in report.drop_times.iter().zip([1.0, 2.0]) {
        assert!((m - p).abs() <= 0.10 * p, "{m} vs {p}");
    }
    let pred = dln_sequence(&prob).unwrap();
    let rep = probe_curve(&pred, &run.times, &run.losses, &Tolerances::default());
    assert!(rep.rows[..3].iter().all(|r| r.pass), "{:#?}", rep.rows);
}

#[test]
fn dln_run_conserves_hyperbola() {
    let alpha = 1e-3;
    let prob = DlnProblem::two_coordinate(alpha);
    let mut cfg = GfConfig::new(alpha, 0, 3.0);
    cfg.integrator = GfIntegrator::Flow { ctrl: StepControl::adaptive(1e-12, 1e-10) };
    let run = gf_train(&prob, &cfg).unwrap();
    for th in run.final_params.chunks(2) {
        let q = th[0] * th[0] - th[1] * th[1];
        assert!((q - 2.0 * alpha * alpha).abs() < 1e-9, "{q:e}");
    }
}

#[test]
fn descent_tracks_flow() {
    let alpha = 1e-3;
    let prob = DlnProblem::two_coordinate(alpha);
    // Ends on the second plateau, where a small time shift barely moves the loss.
    let flow = gf_train(&prob, &GfConfig::new(alpha, 0, 1.6)).unwrap();
    let mut cfg = GfConfig::new(alpha, 0, 1.6);
    cfg.integrator = GfIntegrator::Descent { dt: None };
    let gd = gf_train(&prob, &cfg).unwrap();
    let (lf, lg) = (flow.losses.last().unwrap(), gd.losses.last().unwrap());
    assert!((lf - lg).abs() < 1e-2 * lf, "{lf} vs {lg}");
    assert!(gd.max_uptick() < 1e-10);
}

#[test]
fn seeds_reproduce_exactly() {
    let prob = FclnProblem::diagonal(&[3.0, 2.0, 1.0], 3, 1e-3).unwrap();
    let a = gf_train(&prob, &GfConfig::new(1e-3, 7, 1.0)).unwrap();
    let b = gf_train(&prob, &GfConfig::new(1e-3, 7, 1.0)).unwrap();
    assert_eq!(a, b);
    let c = gf_train(&prob, &GfConfig::new(1e-3, 8, 1.0)).unwrap();
    assert_ne!(a.final_params, c.final_params);
}

#[test]
fn rejects_bad_config() {
    let prob = DlnProblem::two_coordinate(1e-3);
    assert!(gf_train(&prob, &GfConfig::new(0.0, 0, 1.0)).is_err());
    assert!(gf_train(&prob, &GfConfig::new(1e-3, 0, -1.0)).is_err());
}

#[test]
fn extract_exact_staircase() {
    let (t, l) = staircase(&[3.0, 1.0, 0.5], &[1.0, 2.0], 3.0, 3000);
    let rep = extract(&t, &l, 2, &PlateauParams::default());
    assert_eq!(rep.mismatch, None);
    assert_eq!(rep.levels(), vec![3.0, 1.0, 0.5]);
    for (m, p) in rep.drop_times.iter().zip([1.0, 2.0]) {
        assert!((m - p).abs() <= 1e-3, "{m}");
    }
}

#[test]
fn extract_smooth_decay_flags_mismatch() {
    let t: Vec<f64> = (0..=1000).map(|i| i as f64 * 0.01).collect();
    let l: Vec<f64> = t.iter().map(|&x| (-x).exp()).collect();
    let rep = extract(&t, &l, 2, &PlateauParams::default());
    assert_eq!(rep.plateaus.len(), 1);
    assert!(rep.mismatch.is_some());
}

#[test]
fn compare_marks_missing_plateau() {
    let pred = PredictedSequence {
        model: "test".into(),
        steps: vec![step(0, 3.0, Some(0.0)), step(1, 1.0, Some(1.0)), step(2, 0.5, Some(2.0))],
        flags: vec![],
    };
    let (t, l) = staircase(&[3.0, 1.0, 0.5], &[1.0, 2.0], 3.0, 3000);
    let tol = Tolerances::default();
    assert!(compare_curve(&pred, &t, &l, &PlateauParams::default(), &tol).pass);
    assert!(probe_curve(&pred, &t, &l, &tol).pass);

    // The middle plateau is skipped: a direct drop from 3 to 0.5.
    let (t, l) = staircase(&[3.0, 0.5], &[1.0], 3.0, 3000);
    let rep = compare_curve(&pred, &t, &l, &PlateauParams::default(), &tol);
    assert!(!rep.pass);
    assert!(rep.rows.iter().all(|r| r.measured_loss.is_some() || r.note == "not reached"));
    assert!(!probe_curve(&pred, &t, &l, &tol).pass);

    // The run stops before the last drop.
    let (t, l) = staircase(&[3.0, 1.0], &[1.0], 1.5, 1500);
    let rep = compare_curve(&pred, &t, &l, &PlateauParams::default(), &tol);
    assert!(!rep.pass);
    assert_eq!(rep.rows[2].note, "not reached");
    let rep = probe_curve(&pred, &t, &l, &tol);
    assert!(!rep.pass);
    assert_eq!(rep.rows[2].note, "not reached");
}

fn random_staircase() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..=5).prop_flat_map(|k| {
        (prop::collection::vec(0.25f64..0.7, k - 1), prop::collection::vec(0.5f64..2.0, k)).prop_map(|(ratios, gaps)| {
            let levels: Vec<f64> = std::iter::once(1.0).chain(ratios.iter().scan(1.0, |l, r| {
                *l *= r;
                Some(*l)
            })).collect();
            let drops: Vec<f64> = gaps.iter().scan(0.0, |t, g| {
                *t += g;
                Some(*t)
            }).collect();
            (levels, drops)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn removing_an_interior_plateau_never_passes((levels, drops) in random_staircase(), pick in 0usize..100) {
        let k = levels.len();
        let pred = PredictedSequence {
            model: "test".into(),
            steps: levels
                .iter()
                .enumerate()
                .map(|(i, &l)| step(i, l, Some(if i == 0 { 0.0 } else { drops[i - 1] })))
                .collect(),
            flags: vec![],
        };
        let t_end = drops[k - 1];
        let n = 4000;
        let tol = Tolerances::default();
        let (t, l) = staircase(&levels, &drops[..k - 1], t_end, n);
        prop_assert!(compare_curve(&pred, &t, &l, &PlateauParams::default(), &tol).pass);
        prop_assert!(probe_curve(&pred, &t, &l, &tol).pass);

        let j = 1 + pick % (k - 2);
        let mut lv = levels.clone();
        lv.remove(j);
        let mut dr = drops[..k - 1].to_vec();
        dr.remove(j - 1);
        let (t, l) = staircase(&lv, &dr, t_end, n);
        prop_assert!(!compare_curve(&pred, &t, &l, &PlateauParams::default(), &tol).pass);
        prop_assert!(!probe_curve(&pred, &t, &l, &tol).pass);
    }
}
