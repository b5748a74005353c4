mod common;

use proptest::prelude::*;
use uthp::autograd::{Graph, Tensor};
use uthp::intensity::{
    self, Compensator, IntensityParams, IntensityQuery, IntensityVars, McSamples,
};
use uthp::Model;

use common::{hidden, random_events, small_config};

fn riemann(ip: &IntensityParams, times: &[f64], h: &Tensor, points: usize) -> f64 {
    let mut total = 0.0;
    for (k, w) in times.windows(2).enumerate() {
        let dt = (w[1] - w[0]) / points as f64;
        for j in 0..points {
            let q = IntensityQuery {
                hidden_prev: h.row(k),
                t_prev: w[0],
                t: w[0] + (j as f64 + 0.5) * dt,
            };
            total += ip.total_intensity(&q) * dt;
        }
    }
    total
}

fn constant_params(c: usize, d: usize, k_per_type: f64) -> IntensityParams {
    IntensityParams {
        w: vec![vec![0.0; d]; c],
        b: vec![k_per_type.exp_m1().ln(); c],
        alpha: vec![0.0; c],
        beta: 1.0,
    }
}

proptest! {
    #[test]
    fn constant_intensity_compensators_are_exact(
        gaps in prop::collection::vec(0.01f64..3.0, 1..8),
        k in 0.05f64..4.0,
        m in 1usize..20,
        seed in any::<u64>(),
    ) {
        let mut times = vec![0.5];
        for g in &gaps {
            times.push(times.last().unwrap() + g);
        }
        let ip = constant_params(2, 3, k);
        let h = Tensor::zeros(times.len(), 3);
        let expect = 2.0 * k * (times.last().unwrap() - times[0]);
        let samples = McSamples::draw(&times, m, seed, &[1]).unwrap();
        let mc = ip.compensator_mc(&times, &h, &samples);
        let ni = ip.compensator_trapezoid(&times, &h);
        prop_assert!((mc - expect).abs() <= 1e-9 * expect.max(1.0));
        prop_assert!((ni - expect).abs() <= 1e-9 * expect.max(1.0));
    }

    #[test]
    fn intensity_positive_and_monotone_in_background(
        h in prop::collection::vec(-5.0f64..5.0, 4),
        w in prop::collection::vec(-3.0f64..3.0, 4),
        b in -20.0f64..20.0,
        alpha in -2.0f64..2.0,
        t_prev in 0.0f64..10.0,
        dt in 0.0f64..5.0,
        bump in 1e-3f64..1.0,
    ) {
        let ip = IntensityParams { w: vec![w.clone()], b: vec![b], alpha: vec![alpha], beta: 1.0 };
        let hi = IntensityParams { b: vec![b + bump], ..ip.clone() };
        let q = IntensityQuery { hidden_prev: &h, t_prev, t: t_prev + dt };
        let lo_v = ip.type_intensity(&q, 0);
        prop_assert!(lo_v > 0.0);
        prop_assert!(hi.type_intensity(&q, 0) > lo_v);
        prop_assert!(ip.total_intensity(&q) >= lo_v);
    }
}

#[test]
fn matches_straight_line_recomputation() {
    let ip = IntensityParams {
        w: vec![vec![0.3, -0.2, 0.5], vec![-0.1, 0.4, 0.2]],
        b: vec![0.1, -0.3],
        alpha: vec![-0.1, 0.25],
        beta: 2.0,
    };
    let h = [0.7, -1.1, 0.4];
    let q = IntensityQuery {
        hidden_prev: &h,
        t_prev: 2.0,
        t: 2.6,
    };
    let logit: f64 = -0.3 + 0.25 * (0.6 / 2.0) + (-0.1 * 0.7 + 0.4 * -1.1 + 0.2 * 0.4);
    let expect = (1.0 + (2.0 * logit).exp()).ln() / 2.0;
    assert!((ip.type_intensity(&q, 1) - expect).abs() < 1e-15);
}

#[test]
fn trapezoid_exact_for_linear_intensity() {
    // Steep softplus with positive logits is the identity, so λ is linear in t.
    let ip = IntensityParams {
        w: vec![vec![0.0; 2]],
        b: vec![3.0],
        alpha: vec![0.7],
        beta: 200.0,
    };
    let times = [1.0, 1.5, 3.0, 3.2];
    let h = Tensor::zeros(4, 2);
    let mut expect = 0.0;
    for w in times.windows(2) {
        let r = (w[1] - w[0]) / w[0];
        expect += (w[1] - w[0]) * (3.0 + 0.7 * r / 2.0);
    }
    assert!((ip.compensator_trapezoid(&times, &h) - expect).abs() < 1e-12);
}

#[test]
fn estimators_track_fine_grid_on_random_models() {
    for seed in 0..5 {
        let model = Model::build(small_config(), 3, seed).unwrap();
        let events = random_events(seed, 7, 3);
        let times: Vec<f64> = events.iter().map(|e| e.time).collect();
        let (h, _) = hidden(&model, &events);
        let ip = IntensityParams::from_store(&model.params, 1.0).unwrap();
        let oracle = riemann(&ip, &times, &h, 10_000);
        let ni = ip.compensator_trapezoid(&times, &h);
        assert!(
            (ni - oracle).abs() / oracle < 0.05,
            "seed {seed}: {ni} vs {oracle}"
        );

        // Mean of 200 estimates with M = 10 within 3 standard errors.
        let draws: Vec<f64> = (0..200)
            .map(|k| {
                ip.compensator_mc(
                    &times,
                    &h,
                    &McSamples::draw(&times, 10, k, &[seed]).unwrap(),
                )
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / 200.0;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 199.0;
        let se = (var / 200.0).sqrt();
        assert!(
            (mean - oracle).abs() < 3.0 * se + 1e-12,
            "seed {seed}: {mean} ± {se} vs {oracle}"
        );
    }
}

#[test]
fn monte_carlo_variance_shrinks_like_one_over_m() {
    let model = Model::build(small_config(), 2, 9).unwrap();
    let events = random_events(9, 6, 2);
    let times: Vec<f64> = events.iter().map(|e| e.time).collect();
    let (h, _) = hidden(&model, &events);
    let ip = IntensityParams::from_store(&model.params, 1.0).unwrap();
    let ms = [2usize, 8, 32, 128];
    let points: Vec<(f64, f64)> = ms
        .iter()
        .map(|&m| {
            let v: Vec<f64> = (0..400)
                .map(|k| {
                    ip.compensator_mc(
                        &times,
                        &h,
                        &McSamples::draw(&times, m, k, &[m as u64]).unwrap(),
                    )
                })
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            ((m as f64).ln(), var.ln())
        })
        .collect();
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((slope + 1.0).abs() < 0.2, "slope {slope}");
}

#[test]
fn homogeneous_poisson_closed_form() {
    let k: f64 = 0.8;
    let ip = constant_params(1, 2, k);
    let times = [1.0, 2.0, 3.0];
    let h = Tensor::zeros(3, 2);
    let closed = 2.0 * k.ln() - 2.0 * k;
    let ll = ip
        .sequence_loglik(&times, &[1, 1, 1], &h, &Compensator::Trapezoid)
        .unwrap();
    assert!((ll - closed).abs() < 1e-12);
    assert_eq!(
        ip.sequence_loglik(&[4.0], &[1], &Tensor::zeros(1, 2), &Compensator::Trapezoid)
            .unwrap(),
        0.0
    );
}

#[test]
fn graph_and_scalar_paths_agree() {
    let model = Model::build(small_config(), 3, 4).unwrap();
    let events = random_events(4, 8, 3);
    let times: Vec<f64> = events.iter().map(|e| e.time).collect();
    let types: Vec<usize> = events.iter().map(|e| e.type_id).collect();
    let (h, _) = hidden(&model, &events);
    let ip = IntensityParams::from_store(&model.params, 1.0).unwrap();
    let samples = McSamples::draw(&times, 50, 3, &[]).unwrap();
    for comp in [Compensator::MonteCarlo(&samples), Compensator::Trapezoid] {
        let scalar = ip.sequence_loglik(&times, &types, &h, &comp).unwrap();
        let mut g = Graph::new();
        let params = model.params.attach(&mut g, false);
        let iv = IntensityVars::bind(&params, 1.0).unwrap();
        let hv = g.constant(h.clone());
        let ll = intensity::sequence_loglik(&mut g, &iv, hv, &times, &types, &comp).unwrap();
        let graph = g.value(ll).item();
        assert!(
            (scalar - graph).abs() < 1e-10 * scalar.abs().max(1.0),
            "{scalar} vs {graph}"
        );
    }
}
