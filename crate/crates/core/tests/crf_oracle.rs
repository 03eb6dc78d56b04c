use std::sync::Arc;

use dgcrf_core::crf::{
    compare, couple, energy, exact_solve, meanfield_iterate, meanfield_step, nmf_layer, random_instance, unary_mean,
    CrfNodes, CrfWeights, KernelBank,
};
use dgcrf_core::{Graph, Rng, Tensor};

fn two_pixel_bank() -> KernelBank {
    KernelBank::from_fn(1, 2, 3, |_, _| [1.0, 0.0]).unwrap()
}

fn map(values: &[f64], h: usize, w: usize) -> Tensor {
    Tensor::new(&[1, 1, h, w], values.to_vec()).unwrap()
}

#[test]
fn two_pixel_fixed_point_is_one_third_two_thirds() {
    let bank = two_pixel_bank();
    let w = CrfWeights::new([1.0, 0.0], [1.0, 0.0]).unwrap();
    let d_a = map(&[0.0, 1.0], 1, 2);
    let d_h = map(&[0.0, 0.0], 1, 2);
    let exact = exact_solve(&d_a, &d_h, &bank, &w).unwrap();
    assert!((exact.d.data()[0] - 1.0 / 3.0).abs() < 1e-10);
    assert!((exact.d.data()[1] - 2.0 / 3.0).abs() < 1e-10);
    let (mf, _) = meanfield_iterate(&d_a, &d_h, &bank, &w, 200).unwrap();
    assert!((mf.data()[0] - 1.0 / 3.0).abs() < 1e-10);
    assert!((mf.data()[1] - 2.0 / 3.0).abs() < 1e-10);
}

#[test]
fn two_pixel_energy_by_hand() {
    let bank = two_pixel_bank();
    let w = CrfWeights::new([1.0, 0.0], [1.0, 0.0]).unwrap();
    let d = map(&[0.0, 1.0], 1, 2);
    let zero = map(&[0.0, 0.0], 1, 2);
    assert_eq!(energy(&d, &d, &zero, &bank, &w).unwrap(), 1.0);
    let c = map(&[0.7, 0.7], 1, 2);
    assert_eq!(energy(&c, &c, &c, &bank, &w).unwrap(), 0.0);
}

#[test]
fn unary_only_closed_forms() {
    let mut rng = Rng::new(1);
    let inst = random_instance(5, 6, &mut rng).unwrap();
    let mid = CrfWeights::new([0.8, 0.8], [0.0, 0.0]).unwrap();
    let step = meanfield_step(&inst.d_a, &inst.d_a, &inst.d_h, &inst.bank, &mid).unwrap();
    let want = inst.d_a.zip_map(&inst.d_h, |a, h| (0.8 * a + 0.8 * h) / 1.6).unwrap();
    assert!(step.max_abs_diff(&want) < 1e-14);
    let a_only = CrfWeights::new([1.0, 0.0], [0.0, 0.0]).unwrap();
    let step = meanfield_step(&inst.d_h, &inst.d_a, &inst.d_h, &inst.bank, &a_only).unwrap();
    assert_eq!(step, inst.d_a);
    let a_only = CrfWeights::new([1.3, 0.0], [0.0, 0.0]).unwrap();
    let step = meanfield_step(&inst.d_h, &inst.d_a, &inst.d_h, &inst.bank, &a_only).unwrap();
    assert!(step.max_abs_diff(&inst.d_a) <= 2.0 * f64::EPSILON * inst.d_a.max_value());
    let exact = exact_solve(&inst.d_a, &inst.d_h, &inst.bank, &mid).unwrap();
    assert!(exact.d.max_abs_diff(&want) < 1e-12);
}

#[test]
fn meanfield_matches_exact_on_random_instances() {
    let mut rng = Rng::new(2024);
    for k in 0..20 {
        let inst = random_instance(8, 8, &mut rng).unwrap();
        let cmp = compare(&inst, 500).unwrap();
        assert!(cmp.max_diff < 1e-8, "instance {k}: {}", cmp.max_diff);
        assert!(cmp.fixed_point_gap < 1e-10, "instance {k}: {}", cmp.fixed_point_gap);
        assert!(cmp.exact_residual < 1e-12);
        assert!(cmp.contracts_after(3), "instance {k}");
        assert!(*cmp.sup_diffs.last().unwrap() < 1e-12);
    }
}

#[test]
fn energy_never_increases() {
    let mut rng = Rng::new(7);
    for _ in 0..5 {
        let inst = random_instance(6, 7, &mut rng).unwrap();
        let (_, trace) = meanfield_iterate(&inst.d_a, &inst.d_h, &inst.bank, &inst.weights, 30).unwrap();
        for p in trace.energies.windows(2) {
            assert!(p[1] <= p[0] * (1.0 + 1e-12), "{} -> {}", p[0], p[1]);
        }
    }
}

#[test]
fn step_is_convex_combination() {
    let mut rng = Rng::new(8);
    let inst = random_instance(6, 6, &mut rng).unwrap();
    let d = Tensor::rand_uniform(&[1, 1, 6, 6], -3.0, 12.0, &mut rng);
    let next = meanfield_step(&d, &inst.d_a, &inst.d_h, &inst.bank, &inst.weights).unwrap();
    let r = (inst.bank.window() / 2) as isize;
    for y in 0..6isize {
        for x in 0..6isize {
            let i = (y * 6 + x) as usize;
            let mut lo = inst.d_a.data()[i].min(inst.d_h.data()[i]);
            let mut hi = inst.d_a.data()[i].max(inst.d_h.data()[i]);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if (dy, dx) != (0, 0) && (0..6).contains(&ny) && (0..6).contains(&nx) {
                        let v = d.data()[(ny * 6 + nx) as usize];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            let v = next.data()[i];
            assert!(lo - 1e-12 <= v && v <= hi + 1e-12);
        }
    }
}

#[test]
fn nmf_layer_matches_reference_iteration() {
    let mut rng = Rng::new(9);
    let inst = random_instance(5, 6, &mut rng).unwrap();
    let (want, _) = meanfield_iterate(&inst.d_a, &inst.d_h, &inst.bank, &inst.weights, 4).unwrap();
    let mut g = Graph::new();
    let a = g.constant(inst.d_a.clone()).unwrap();
    let h = g.constant(inst.d_h.clone()).unwrap();
    let w = CrfNodes::constant(&mut g, &inst.weights).unwrap();
    let out = nmf_layer(&mut g, a, h, &[Arc::new(inst.bank.clone())], w, 4).unwrap();
    assert!(g.value(out).max_abs_diff(&want) < 1e-12);
    let start = unary_mean(&inst.d_a, &inst.d_h, &inst.weights).unwrap();
    assert!(start.all_finite());
}

/// Gradient of `<r1, d> + <r2, s>` with respect to the four weights, with
/// the chosen passes enabled.
fn crf_grads(passes: (bool, bool), seed: u64) -> (Tensor, Tensor) {
    let mut rng = Rng::new(seed);
    let inst = random_instance(5, 5, &mut rng).unwrap();
    let s_a = Tensor::rand_uniform(&[1, 1, 5, 5], 0.05, 0.95, &mut rng);
    let s_b = Tensor::rand_uniform(&[1, 1, 5, 5], 0.05, 0.95, &mut rng);
    let r1 = Tensor::rand_uniform(&[1, 1, 5, 5], -1.0, 1.0, &mut rng);
    let r2 = Tensor::rand_uniform(&[1, 1, 5, 5], -1.0, 1.0, &mut rng);
    let banks = vec![Arc::new(inst.bank.clone())];

    let mut g = Graph::new();
    let la = g.param(Tensor::from_vec(inst.weights.alpha.map(f64::ln).to_vec())).unwrap();
    let lb = g.param(Tensor::from_vec(inst.weights.beta.map(f64::ln).to_vec())).unwrap();
    let w = CrfNodes::from_log(&mut g, la, lb).unwrap();
    let ids = [&inst.d_a, &inst.d_h, &s_a, &s_b, &r1, &r2].map(|t| g.constant(t.clone()).unwrap());
    let (d, s) = if passes == (true, true) {
        couple(&mut g, (ids[0], ids[1]), (ids[2], ids[3]), &banks, w, 5).unwrap()
    } else {
        (
            nmf_layer(&mut g, ids[0], ids[1], &banks, w, 5).unwrap(),
            nmf_layer(&mut g, ids[2], ids[3], &banks, w, 5).unwrap(),
        )
    };
    let mut terms = Vec::new();
    for (on, out, r) in [(passes.0, d, ids[4]), (passes.1, s, ids[5])] {
        if on {
            let p = g.mul(out, r).unwrap();
            terms.push(g.sum(p).unwrap());
        }
    }
    let loss = if terms.len() == 2 { g.add(terms[0], terms[1]).unwrap() } else { terms[0] };
    let grads = g.backward(loss).unwrap();
    (grads.get(la).unwrap().clone(), grads.get(lb).unwrap().clone())
}

#[test]
fn coupled_gradient_is_sum_of_pass_gradients() {
    for seed in 0..5 {
        let (ca, cb) = crf_grads((true, true), seed);
        let (a1, b1) = crf_grads((true, false), seed);
        let (a2, b2) = crf_grads((false, true), seed);
        for i in 0..2 {
            assert!((ca.data()[i] - a1.data()[i] - a2.data()[i]).abs() < 1e-12);
            assert!((cb.data()[i] - b1.data()[i] - b2.data()[i]).abs() < 1e-12);
        }
        assert!(ca.data().iter().chain(cb.data()).all(|v| *v != 0.0));
    }
}

#[test]
fn fused_scores_stay_in_unit_interval() {
    let mut rng = Rng::new(11);
    for _ in 0..10 {
        let inst = random_instance(6, 6, &mut rng).unwrap();
        let s_a = Tensor::rand_uniform(&[1, 1, 6, 6], 1e-6, 1.0 - 1e-6, &mut rng);
        let s_b = Tensor::rand_uniform(&[1, 1, 6, 6], 1e-6, 1.0 - 1e-6, &mut rng);
        let mut g = Graph::new();
        let ids = [&inst.d_a, &inst.d_h, &s_a, &s_b].map(|t| g.constant(t.clone()).unwrap());
        let w = CrfNodes::constant(&mut g, &inst.weights).unwrap();
        let (_, s) = couple(&mut g, (ids[0], ids[1]), (ids[2], ids[3]), &[Arc::new(inst.bank.clone())], w, 5).unwrap();
        assert!(g.value(s).data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}

#[test]
fn couple_rejects_scores_outside_unit_interval() {
    let mut rng = Rng::new(12);
    let inst = random_instance(5, 5, &mut rng).unwrap();
    let mut g = Graph::new();
    let bad = Tensor::full(&[1, 1, 5, 5], 1.0);
    let ids = [&inst.d_a, &inst.d_h, &bad, &bad].map(|t| g.constant(t.clone()).unwrap());
    let w = CrfNodes::constant(&mut g, &inst.weights).unwrap();
    assert!(couple(&mut g, (ids[0], ids[1]), (ids[2], ids[3]), &[Arc::new(inst.bank.clone())], w, 2).is_err());
}
