use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::numerics::gradcheck::relative_error;
use crate::numerics::{LinearTerm, Tape};

fn cfg(d: usize, expansion: usize, k_ratio: f64, l1: f64, topk: TopkMode) -> SaeConfig {
    SaeConfig { d, expansion, k_ratio, l1, topk, ..SaeConfig::default() }
}

fn random_model(c: &SaeConfig, seed: u64) -> SaeModel {
    let mut rng = SeedTree::new(seed).rng();
    let (n, d) = (c.latent(), c.d);
    let mut m = SaeModel::init(c, &vec![0.0; d]).unwrap();
    m.w_enc = Tensor::randn(&[n, d], 0.5, &mut rng);
    m.b_enc = Tensor::randn(&[n], 0.1, &mut rng);
    m.b_dec = Tensor::randn(&[d], 0.1, &mut rng);
    m
}

fn random_vec(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeedTree::new(seed).rng();
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn topk_examples() {
    let z = [3.0, 1.0, 2.0];
    assert_eq!(topk_sparsify(&z, 2, TopkMode::Shifted).unwrap(), vec![1.0, 0.0, 0.0]);
    assert_eq!(topk_sparsify(&z, 2, TopkMode::Masked).unwrap(), vec![3.0, 0.0, 2.0]);
    let neg = [-1.0, -4.0, -2.5];
    assert_eq!(topk_sparsify(&neg, 3, TopkMode::Shifted).unwrap(), vec![3.0, 0.0, 1.5]);
    assert_eq!(topk_sparsify(&neg, 3, TopkMode::Masked).unwrap(), vec![0.0; 3]);
    assert!(matches!(topk_sparsify(&z, 0, TopkMode::Masked), Err(Error::Parameter(_))));
    assert!(matches!(topk_sparsify(&z, 4, TopkMode::Shifted), Err(Error::Parameter(_))));
}

#[test]
fn topk_ties() {
    // τ = 2 is attained twice; the shifted formula zeroes both
    let z = [2.0, 5.0, 2.0, 1.0];
    assert_eq!(topk_sparsify(&z, 2, TopkMode::Shifted).unwrap(), vec![0.0, 3.0, 0.0, 0.0]);
    // masked keeps the lower index among equals
    assert_eq!(topk_sparsify(&z, 2, TopkMode::Masked).unwrap(), vec![2.0, 5.0, 0.0, 0.0]);
    assert_eq!(topk_sparsify(&[1.0; 4], 2, TopkMode::Masked).unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
}

proptest! {
    #[test]
    fn topk_sparsity_and_support(z in prop::collection::vec(-100.0f64..100.0, 1..64), kf in 0.0f64..1.0) {
        let k = 1 + (kf * (z.len() - 1) as f64) as usize;
        let mut sorted = z.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let kth = sorted[k - 1];
        for mode in [TopkMode::Shifted, TopkMode::Masked] {
            let out = topk_sparsify(&z, k, mode).unwrap();
            prop_assert!(out.iter().filter(|&&v| v != 0.0).count() <= k);
            prop_assert!(out.iter().all(|&v| v >= 0.0));
            for (i, &v) in out.iter().enumerate() {
                if v != 0.0 {
                    prop_assert!(z[i] >= kth);
                }
            }
        }
    }

    // Dyadic values keep the additions exact, so the shifted output must not change at all.
    #[test]
    fn shifted_output_invariant_to_constant(raw in prop::collection::vec(-4096i32..4096, 2..40), c in -4096i32..4096, kf in 0.0f64..1.0) {
        let z: Vec<f64> = raw.iter().map(|&v| f64::from(v) / 64.0).collect();
        let shift = f64::from(c) / 64.0;
        let k = 1 + (kf * (z.len() - 1) as f64) as usize;
        let moved: Vec<f64> = z.iter().map(|v| v + shift).collect();
        prop_assert_eq!(
            topk_sparsify(&z, k, TopkMode::Shifted).unwrap(),
            topk_sparsify(&moved, k, TopkMode::Shifted).unwrap()
        );
        let support = |v: Vec<f64>| v.iter().map(|&x| x != 0.0).collect::<Vec<_>>();
        let masked_pos: Vec<f64> = z.iter().map(|v| v + 100.0).collect();
        let masked_moved: Vec<f64> = masked_pos.iter().map(|v| v + shift.abs()).collect();
        prop_assert_eq!(
            support(topk_sparsify(&masked_pos, k, TopkMode::Masked).unwrap()),
            support(topk_sparsify(&masked_moved, k, TopkMode::Masked).unwrap())
        );
    }
}

#[test]
fn k_from_ratio() {
    assert_eq!(cfg(32, 1, 0.01, 0.0, TopkMode::Masked).k(), 1);
    assert_eq!(cfg(32, 4, 0.1, 0.0, TopkMode::Masked).k(), 13);
    assert_eq!(cfg(64, 4, 0.1, 0.0, TopkMode::Masked).k(), 26);
    assert_eq!(cfg(8, 2, 1.0, 0.0, TopkMode::Masked).k(), 16);
    assert!(cfg(8, 2, 0.0, 0.0, TopkMode::Masked).validate().is_err());
    assert!(cfg(8, 2, 0.5, -1.0, TopkMode::Masked).validate().is_err());
}

#[test]
fn encode_decode_examples() {
    let c = cfg(4, 1, 0.5, 0.0, TopkMode::Masked);
    let mut m = random_model(&c, 1);
    assert_eq!(m.encode(&[0.0; 4]).unwrap(), m.b_enc.data());
    m.w_enc = Tensor::identity(4);
    m.b_enc = Tensor::zeros(&[4]);
    assert_eq!(m.encode(&[1.0, -2.0, 0.5, 3.0]).unwrap(), vec![1.0, -2.0, 0.5, 3.0]);
    assert!(matches!(m.encode(&[0.0; 3]), Err(Error::Dimension(_))));

    assert_eq!(m.decode(&[0.0; 4]).unwrap(), m.b_dec.data());
    let v = 1.5;
    let got = m.decode(&[0.0, 0.0, v, 0.0]).unwrap();
    for j in 0..4 {
        assert_eq!(got[j], v * m.w_dec.data()[2 * 4 + j] + m.b_dec.data()[j]);
    }
    assert!(matches!(m.decode(&[0.0; 5]), Err(Error::Dimension(_))));
}

#[test]
fn encode_decode_match_scalar_loops() {
    let c = cfg(12, 3, 0.2, 0.0, TopkMode::Shifted);
    for seed in 0..20 {
        let m = random_model(&c, seed);
        let x = random_vec(12, seed + 100);
        let z = m.encode(&x).unwrap();
        for i in 0..36 {
            let mut acc = m.b_enc.data()[i];
            for j in 0..12 {
                acc += x[j] * m.w_enc.data()[i * 12 + j];
            }
            assert!((z[i] - acc).abs() < 1e-5);
        }
        let zs = random_vec(36, seed + 200);
        let xhat = m.decode(&zs).unwrap();
        for j in 0..12 {
            let mut acc = m.b_dec.data()[j];
            for i in 0..36 {
                acc += zs[i] * m.w_dec.data()[i * 12 + j];
            }
            assert!((xhat[j] - acc).abs() < 1e-5);
        }
    }
}

#[test]
fn loss_examples() {
    let c = cfg(3, 1, 1.0, 0.0, TopkMode::Masked);
    let mut m = random_model(&c, 2);
    m.w_enc = Tensor::identity(3);
    m.w_dec = Tensor::identity(3);
    m.b_enc = Tensor::zeros(&[3]);
    m.b_dec = Tensor::zeros(&[3]);
    // positive inputs pass through masked top-3 unchanged
    assert_eq!(m.loss(&[0.5, 1.0, 2.0, 0.25, 0.75, 3.0]).unwrap(), 0.0);

    let batch = random_vec(8 * 20, 3);
    let base = cfg(8, 4, 0.25, 0.0, TopkMode::Shifted);
    let m0 = random_model(&base, 4);
    let lambda = 0.3;
    let m1 = SaeModel { config: SaeConfig { l1: lambda, ..base }, ..m0.clone() };
    let mean_l1: f64 = batch.chunks(8).map(|x| m0.encode_sparse(x).unwrap().l1()).sum::<f64>() / 20.0;
    let diff = m1.loss(&batch).unwrap() - m0.loss(&batch).unwrap();
    assert!((diff - lambda * mean_l1).abs() < 1e-12);
}

fn flat_grads(g: &[Vec<f64>; 4]) -> Vec<f64> {
    g.iter().flatten().copied().collect()
}

fn param_mut(w: &mut SaeModel, t: usize) -> &mut Tensor {
    match t {
        0 => &mut w.w_enc,
        1 => &mut w.b_enc,
        2 => &mut w.w_dec,
        _ => &mut w.b_dec,
    }
}

fn fd_grads(m: &SaeModel, batch: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut work = m.clone();
    for t in 0..4 {
        let len = m.params()[t].numel();
        for i in 0..len {
            let orig = param_mut(&mut work, t).data()[i];
            param_mut(&mut work, t).data_mut()[i] = orig + h;
            let plus = work.loss(batch).unwrap();
            param_mut(&mut work, t).data_mut()[i] = orig - h;
            let minus = work.loss(batch).unwrap();
            param_mut(&mut work, t).data_mut()[i] = orig;
            out.push((plus - minus) / (2.0 * h));
        }
    }
    out
}

#[test]
fn gradient_matches_finite_differences() {
    for mode in [TopkMode::Shifted, TopkMode::Masked] {
        let c = cfg(8, 4, 0.25, 0.05, mode);
        let m = random_model(&c, 5);
        let batch = random_vec(8 * 6, 6);
        let (_, g) = m.loss_and_grad(&batch, true).unwrap();
        let err = relative_error(&flat_grads(&g.unwrap()), &fd_grads(&m, &batch, 1e-6));
        assert!(err < 1e-3, "{mode:?}: relative error {err}");
    }
}

// The same loss built from tape primitives, with the top-k support frozen
// as a fixed sparse linear map.
#[test]
fn gradient_matches_tape() {
    let c = cfg(6, 2, 0.4, 0.02, TopkMode::Shifted);
    let m = random_model(&c, 7);
    let batch = random_vec(6 * 5, 8);
    let (loss, g) = m.loss_and_grad(&batch, true).unwrap();

    let mut tape = Tape::new();
    let w_enc = tape.param(&m.w_enc);
    let b_enc = tape.param(&m.b_enc);
    let w_dec = tape.param(&m.w_dec);
    let b_dec = tape.param(&m.b_dec);
    let mut total = None;
    for x in batch.chunks(6) {
        let code = m.encode_sparse(x).unwrap();
        let xv = tape.constant(Tensor::matrix(1, 6, x.to_vec()).unwrap());
        let z = tape.matmul_bt(xv, w_enc).unwrap();
        let z = tape.add_row(z, b_enc).unwrap();
        let mut terms = Vec::new();
        for &(i, _) in &code.entries {
            terms.push(LinearTerm { out: i, input: i, coef: 1.0 });
            terms.push(LinearTerm { out: i, input: code.tau_index, coef: -1.0 });
        }
        let zs = tape.sparse_linear(z, terms).unwrap();
        let xhat = tape.matmul(zs, w_dec).unwrap();
        let xhat = tape.add_row(xhat, b_dec).unwrap();
        let r = tape.sub(xhat, xv).unwrap();
        let sq = tape.mul(r, r).unwrap();
        let sq = tape.sum(sq);
        let a = tape.abs(zs);
        let l1 = tape.sum(a);
        let l1 = tape.scale(l1, c.l1);
        let per = tape.add(sq, l1).unwrap();
        total = Some(match total {
            None => per,
            Some(t) => tape.add(t, per).unwrap(),
        });
    }
    let mean = tape.scale(total.unwrap(), 1.0 / 5.0);
    assert!((tape.scalar(mean) - loss).abs() < 1e-12);
    let tg = tape.backward(mean).unwrap();
    let tape_flat: Vec<f64> = [w_enc, b_enc, w_dec, b_dec].iter().flat_map(|&v| tg.wrt_or_zeros(v).into_data()).collect();
    assert!(relative_error(&flat_grads(&g.unwrap()), &tape_flat) < 1e-10);
}

#[test]
fn init_and_round_trip() {
    let c = cfg(5, 2, 0.3, 0.0, TopkMode::Masked);
    let mean = vec![0.1, 0.2, 0.3, 0.4, 0.5];
    let m = SaeModel::init(&c, &mean).unwrap();
    assert_eq!(m.w_enc, m.w_dec);
    assert_eq!(m.b_dec.data(), &mean[..]);
    for row in m.w_dec.data().chunks(5) {
        assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.sae");
    m.save(&p).unwrap();
    assert_eq!(SaeModel::load(&p).unwrap(), m);
    assert!(crate::policy::Policy::load(&p).is_err());
}

fn synthetic(d: usize, group: usize, groups: usize, seed: u64) -> ActivationMatrix {
    // rows built from a few sparse directions plus noise
    let mut rng = SeedTree::new(seed).rng();
    let atoms: Vec<Vec<f64>> = (0..3 * d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut rows = Vec::new();
    for _ in 0..group * groups {
        let mut x = vec![0.0f64; d];
        for _ in 0..3 {
            let a = &atoms[rng.random_range(0..atoms.len())];
            let s = rng.random_range(0.5..2.0);
            x.iter_mut().zip(a).for_each(|(v, w)| *v += s * w);
        }
        rows.extend(x.iter().map(|&v| (v + rng.random_range(-0.01..0.01)) as f32));
    }
    ActivationMatrix::new(d, group, rows).unwrap()
}

#[test]
fn holdout_split_respects_groups() {
    let data = synthetic(4, 10, 20, 1);
    let (train, held) = data.split_holdout(0.1).unwrap();
    assert_eq!((train.len(), held.len()), (180, 20));
    assert_eq!(held.row(0), data.row(180));
    assert!(ActivationMatrix::new(4, 10, vec![0.0; 36]).is_err());
}

#[test]
fn training_reduces_error_and_keeps_invariants() {
    let data = synthetic(8, 10, 100, 2);
    let c = SaeConfig {
        d: 8,
        expansion: 4,
        k_ratio: 0.1,
        l1: 1e-3,
        batch_size: 64,
        steps: 300,
        eval_every: 100,
        ..SaeConfig::default()
    };
    let (_, held) = data.split_holdout(c.holdout_fraction).unwrap();
    let untrained = evaluate(&SaeModel::init(&c, &data.mean()).unwrap(), &held).unwrap().0;
    let mut seen = 0;
    let t = train_sae(&c, &data, &mut |_| seen += 1).unwrap();
    assert_eq!(seen, 3);
    let m = t.final_metrics();
    assert!(m.nmse < untrained.nmse, "{} vs {}", m.nmse, untrained.nmse);
    assert!(m.max_l0 <= c.k());
    assert_eq!(t.firing_frequency.len(), 32);
    assert!(t.firing_frequency.iter().all(|&f| (0.0..=1.0).contains(&f)));
    assert_eq!(m.dead_features, t.firing_frequency.iter().filter(|&&f| f == 0.0).count());
    for row in t.model.w_dec.data().chunks(8) {
        assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-5);
    }
    assert!(matches!(train_sae(&SaeConfig { d: 9, ..c }, &data, &mut |_| {}), Err(Error::Format(_))));
}

#[test]
fn single_point_grid_matches_direct_training() {
    let data = synthetic(6, 5, 40, 3);
    let c = SaeConfig { d: 6, expansion: 2, k_ratio: 0.2, l1: 1e-2, batch_size: 32, steps: 40, eval_every: 40, ..SaeConfig::default() };
    let direct = train_sae(&c, &data, &mut |_| {}).unwrap();
    let grid = GridSpec { expansions: vec![2], k_ratios: vec![0.2], l1: vec![1e-2] };
    let dir = tempfile::tempdir().unwrap();
    let rows = grid_search(&c, &grid, &data, Some(dir.path()), &mut |_| {}).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].nmse, Some(direct.final_metrics().nmse));
    let saved = SaeModel::load(rows[0].model_path.as_ref().unwrap()).unwrap();
    assert_eq!(saved, direct.model);
    let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn grid_records_failures_and_continues() {
    let data = synthetic(4, 5, 10, 4);
    let c = SaeConfig { d: 4, batch_size: 8, steps: 2, eval_every: 1, ..SaeConfig::default() };
    let grid = GridSpec { expansions: vec![1], k_ratios: vec![0.5, 2.0], l1: vec![0.0] };
    let rows = grid_search(&c, &grid, &data, None, &mut |_| {}).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].error.is_none() && rows[0].nmse.is_some());
    assert!(rows[1].error.is_some());
    assert_eq!(GridSpec::default().configs(&c).len(), 24);
    let empty = GridSpec { expansions: vec![], ..GridSpec::default() };
    assert!(grid_search(&c, &empty, &data, None, &mut |_| {}).is_err());
}
