use std::cell::RefCell;

use karma_core::diffcore::{grad_check, DiffError, ParamStore, Tape, Tensor, Var};
use karma_core::model::{ConditionalMlp, Denoiser, HeadRef, KarmaModel, ModelConfig};
use karma_core::objectives::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::matrix(rows, cols, data).unwrap()
}

fn obj(e: ObjectiveError) -> DiffError {
    match e {
        ObjectiveError::Diff(d) => d,
        other => panic!("unexpected objective error {other}"),
    }
}

/// Independent scalar oracle for the mean pairwise loss.
fn pairwise_oracle(h: &[Vec<f64>], pos: &[Vec<f64>], neg: &[(usize, Vec<f64>)]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let total: f64 = neg
        .iter()
        .map(|(o, n)| {
            let m = dot(&h[*o], &pos[*o]) - dot(&h[*o], n);
            (1.0 + (-m).exp()).ln()
        })
        .sum();
    total / neg.len() as f64
}

fn pairwise(h: &[f64], pos: &[f64], neg: &[f64], owner: &[usize], d: usize) -> f64 {
    let mut t = Tape::<f64>::inference();
    let hv = t.constant(&mat(h.len() / d, d, h.to_vec())).unwrap();
    let pv = t.constant(&mat(pos.len() / d, d, pos.to_vec())).unwrap();
    let nv = t.constant(&mat(neg.len() / d, d, neg.to_vec())).unwrap();
    let l = pairwise_ce_loss(&mut t, hv, pv, nv, owner).unwrap();
    t.scalar(l)
}

#[test]
fn pairwise_ce_reference_values() {
    // Zero margins.
    let v = pairwise(&[1.0, 2.0], &[0.5, 0.5], &[0.5, 0.5, 0.5, 0.5], &[0, 0], 2);
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    // Saturated margin +20.
    let v = pairwise(&[1.0, 0.0], &[10.0, 0.0], &[-10.0, 0.0], &[0], 2);
    assert!(v < 1e-8 && v > 0.0);
    // h=(1,0), e+=(1,0), e-=(0,1): -ln sigmoid(1).
    let v = pairwise(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0], 2);
    assert!((v - 0.313262).abs() < 1e-6);
    assert!((v - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
}

#[test]
fn pairwise_ce_matches_oracle_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 6;
    for _ in 0..20 {
        let b = rng.random_range(1..5);
        let p = rng.random_range(1..9);
        let mut g = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
        let (h, pos, neg) = (g(b * d), g(b * d), g(p * d));
        let owner: Vec<usize> = (0..p).map(|i| i % b).collect();
        let rows = |x: &[f64]| x.chunks(d).map(|r| r.to_vec()).collect::<Vec<_>>();
        let negs: Vec<(usize, Vec<f64>)> = owner.iter().copied().zip(rows(&neg)).collect();
        let want = pairwise_oracle(&rows(&h), &rows(&pos), &negs);
        let got = pairwise(&h, &pos, &neg, &owner, d);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn pairwise_ce_rejects_empty_and_mismatched_inputs() {
    let mut t = Tape::<f64>::inference();
    let h = t.constant(&mat(1, 2, vec![1.0, 0.0])).unwrap();
    let n = t.constant(&mat(1, 2, vec![0.0, 1.0])).unwrap();
    assert!(matches!(
        pairwise_ce_loss(&mut t, h, h, n, &[]),
        Err(ObjectiveError::EmptyNegatives)
    ));
    assert!(matches!(
        pairwise_ce_loss(&mut t, h, h, n, &[1]),
        Err(ObjectiveError::Shape(_))
    ));
}

proptest! {
    #[test]
    fn pairwise_ce_is_positive_and_strictly_decreasing_in_margin(start in -20.0f64..15.0, step in 0.01f64..2.0) {
        // One pair with h=(1,0), pos=(m,0), neg=(0,0): margin m.
        let at = |m: f64| pairwise(&[1.0, 0.0], &[m, 0.0], &[0.0, 0.0], &[0], 2);
        let (a, b) = (at(start), at(start + step));
        prop_assert!(a > 0.0 && b > 0.0);
        prop_assert!(b < a);
    }

    #[test]
    fn karma_total_matches_recomputation(
        act in 0.0f64..5.0, gen in 0.0f64..5.0, recon in 0.0f64..5.0, img in 0.0f64..5.0,
        ld in 0.0f64..3.0, li in 0.0f64..3.0,
    ) {
        let w = LossWeights { lambda_dec: ld, lambda_img: li };
        let mut t = Tape::<f64>::inference();
        let mut c = |x: f64| t.constant(&Tensor::scalar(x)).unwrap();
        let parts = LossParts { act: Some(c(act)), gen: Some(c(gen)), recon: Some(c(recon)), img: Some(c(img)) };
        let (_, br) = karma_loss(&mut t, &parts, &w).unwrap();
        prop_assert!((br.total - br.recomputed_total(&w)).abs() < 1e-6);
    }
}

#[test]
fn karma_loss_compositions() {
    let mut t = Tape::<f64>::inference();
    let mut c = |x: f64| t.constant(&Tensor::scalar(x)).unwrap();
    let (a, g, r, i) = (c(1.0), c(2.0), c(3.0), c(4.0));
    let full = LossParts {
        act: Some(a),
        gen: Some(g),
        recon: Some(r),
        img: Some(i),
    };
    let w = LossWeights {
        lambda_dec: 0.5,
        lambda_img: 0.25,
    };
    let (_, br) = karma_loss(&mut t, &full, &w).unwrap();
    assert!((br.total - 4.0).abs() < 1e-12);

    // lambda_dec = 0: the total is the action node itself.
    let (v, br) = karma_loss(&mut t, &full, &LossWeights { lambda_dec: 0.0, ..w }).unwrap();
    assert_eq!(v, a);
    assert_eq!(br.total, 1.0);

    // lambda_img = 0: multimodal equals text-only.
    let text = LossParts { img: None, ..full };
    let w0 = LossWeights { lambda_img: 0.0, ..w };
    let (_, mm) = karma_loss(&mut t, &full, &w0).unwrap();
    let (_, tx) = karma_loss(&mut t, &text, &w0).unwrap();
    assert_eq!(mm.total, tx.total);

    let bad = LossWeights {
        lambda_dec: -0.1,
        lambda_img: 0.5,
    };
    assert!(matches!(
        karma_loss(&mut t, &full, &bad),
        Err(ObjectiveError::NegativeWeight { .. })
    ));
}

/// Independent mean CE: log-softmax by direct summation, gather, average.
fn ce_oracle(logits: &[f64], v: usize, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        let row = &logits[r * v..(r + 1) * v];
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        total -= row[y] - m - z.ln();
    }
    total / targets.len() as f64
}

#[test]
fn token_ce_reference_values() {
    let mut t = Tape::<f64>::inference();
    let u = t.constant(&Tensor::zeros(vec![3, 512])).unwrap();
    let l = token_ce(&mut t, u, &[0, 100, 511]).unwrap();
    assert!((t.scalar(l) - 6.238324625039508).abs() < 1e-12);
    assert!((t.scalar(l) - (512f64).ln()).abs() < 1e-12);

    let spike = Tensor::from_fn(vec![2, 16], |i| if i % 16 == 3 { 30.0 } else { 0.0 });
    let s = t.constant(&spike).unwrap();
    let l = token_ce(&mut t, s, &[3, 3]).unwrap();
    assert!(t.scalar(l) < 1e-11);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits: Vec<f64> = (0..5 * 7).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
    let tg = [0, 6, 3, 3, 1];
    let x = t.constant(&mat(5, 7, logits.clone())).unwrap();
    let l = token_ce(&mut t, x, &tg).unwrap();
    assert!((t.scalar(l) - ce_oracle(&logits, 7, &tg)).abs() < 1e-9);
    assert!(matches!(token_ce(&mut t, x, &[]), Err(ObjectiveError::EmptyTarget)));
}

fn tiny_model() -> KarmaModel<f64> {
    KarmaModel::new(ModelConfig {
        vocab_size: 30,
        item_len: 4,
        num_queries: 4,
        visual_dim: 3,
        embed_dim: 6,
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        text_layers: 1,
        ffn_mult: 2,
        max_seq: 4,
        visual_hidden: 8,
        time_features: 4,
        normalize: true,
        use_query: true,
        init_seed: 11,
    })
    .unwrap()
}

#[test]
fn text_losses_match_independent_ce_over_model_logits() {
    let m = tiny_model();
    let targets: [&[u32]; 2] = [&[1, 2, 3, 4], &[9, 8, 7, 6]];
    let flat: Vec<usize> = targets.iter().flat_map(|x| x.iter().map(|&w| w as usize)).collect();
    let mut t = Tape::<f64>::inference();
    let cond = t
        .constant(&Tensor::from_fn(vec![5, 6], |i| (i as f64 * 0.31).sin()))
        .unwrap();

    let c2 = t_slice(&mut t, cond, 0, 2);
    let rec = recon_loss(&mut t, &m, c2, &targets).unwrap();
    let logits = m.text_logits(&mut t, c2, &[0..1, 1..2], &targets).unwrap();
    let want = ce_oracle(t.value(logits), 30, &flat);
    assert!((t.scalar(rec) - want).abs() < 1e-9);

    let gen = gen_loss(&mut t, &m, cond, &[0..3, 3..5], &targets).unwrap();
    let logits = m.text_logits(&mut t, cond, &[0..3, 3..5], &targets).unwrap();
    let want = ce_oracle(t.value(logits), 30, &flat);
    assert!((t.scalar(gen) - want).abs() < 1e-9);

    assert!(matches!(
        recon_loss(&mut t, &m, cond, &targets),
        Err(ObjectiveError::Shape(_))
    ));
    assert!(matches!(
        gen_loss(&mut t, &m, cond, &[0..1], &[&[]]),
        Err(ObjectiveError::EmptyTarget)
    ));
}

fn t_slice(t: &mut Tape<f64>, v: Var, a: usize, b: usize) -> Var {
    t.slice_rows(v, a, b).unwrap()
}

#[test]
fn ar_mse_reference_values_and_gradient() {
    let d = 64;
    let e: Vec<f64> = (0..d).map(|i| ((i as f64) * 0.9).cos()).collect();
    let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    let e: Vec<f64> = e.iter().map(|x| x / n).collect();
    let neg: Vec<f64> = e.iter().map(|x| -x).collect();

    let mut t = Tape::<f64>::new();
    let ev = t.input(&mat(1, d, e.clone())).unwrap();
    let same = t.input(&mat(1, d, e.clone())).unwrap();
    let l0 = ar_mse_loss(&mut t, same, ev).unwrap();
    assert_eq!(t.scalar(l0), 0.0);
    let h = t.input(&mat(1, d, neg.clone())).unwrap();
    let l = ar_mse_loss(&mut t, h, ev).unwrap();
    let oracle: f64 = neg.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d as f64;
    assert!((t.scalar(l) - oracle).abs() < 1e-15);
    assert!((t.scalar(l) - 0.0625).abs() < 1e-12);
    let g = t.backward(l).unwrap();
    for ((gi, hi), ei) in g.get(h).unwrap().iter().zip(&neg).zip(&e) {
        assert!((gi - 2.0 * (hi - ei) / d as f64).abs() < 1e-15);
    }
    // The target is detached.
    assert!(g.get(ev).is_none_or(|x| x.iter().all(|&v| v == 0.0)));

    let short = t.input(&mat(1, 3, vec![0.0; 3])).unwrap();
    assert!(matches!(ar_mse_loss(&mut t, short, ev), Err(ObjectiveError::Shape(_))));
}

#[test]
fn ar_mse_is_mean_seeking() {
    let a = [1.0, -2.0, 0.5, 3.0];
    let b = [-1.0, 4.0, 0.5, 1.0];
    let mut x = Tensor::<f64>::zeros(vec![1, 4]);
    for _ in 0..2000 {
        let mut t = Tape::new();
        let xv = t.input(&x).unwrap();
        let av = t.constant(&mat(1, 4, a.to_vec())).unwrap();
        let bv = t.constant(&mat(1, 4, b.to_vec())).unwrap();
        let la = ar_mse_loss(&mut t, xv, av).unwrap();
        let lb = ar_mse_loss(&mut t, xv, bv).unwrap();
        let s = t.add(la, lb).unwrap();
        let l = t.scale(s, 0.5).unwrap();
        let g = t.backward(l).unwrap();
        let gx = g.get(xv).unwrap().to_vec();
        for (xi, gi) in x.data_mut().iter_mut().zip(gx) {
            *xi -= 0.5 * gi;
        }
    }
    for ((xi, ai), bi) in x.data().iter().zip(a).zip(b) {
        assert!((xi - (ai + bi) / 2.0).abs() < 1e-3);
    }
}

/// Returns a fixed output regardless of inputs.
struct ConstHead(Tensor<f64>);

impl Denoiser<f64> for ConstHead {
    fn x_dim(&self) -> usize {
        self.0.dims2().1
    }
    fn predict(&self, t: &mut Tape<f64>, _: Var, _: Var, _: &[f64]) -> Result<Var, DiffError> {
        t.constant(&self.0)
    }
}

/// Records the inputs it sees, returns zeros.
struct Recorder(RefCell<Vec<(Vec<f64>, Vec<f64>)>>, usize);

impl Denoiser<f64> for Recorder {
    fn x_dim(&self) -> usize {
        self.1
    }
    fn predict(&self, t: &mut Tape<f64>, x: Var, _: Var, time: &[f64]) -> Result<Var, DiffError> {
        self.0.borrow_mut().push((t.value(x).to_vec(), time.to_vec()));
        let (r, c) = t.dims(x);
        t.constant(&Tensor::zeros(vec![r, c]))
    }
}

/// Ideal heads for a point-mass data distribution at `v` (same for every row).
struct Ideal {
    v: Vec<f64>,
    kind: &'static str,
    sched: DdpmSchedule,
    edm: EdmConfig,
}

impl Denoiser<f64> for Ideal {
    fn x_dim(&self) -> usize {
        self.v.len()
    }
    fn predict(&self, t: &mut Tape<f64>, x: Var, _: Var, time: &[f64]) -> Result<Var, DiffError> {
        let d = self.v.len();
        let xs = t.value(x).to_vec();
        let mut out = vec![0.0; xs.len()];
        for (i, &tau) in time.iter().enumerate() {
            for j in 0..d {
                let (xi, vj) = (xs[i * d + j], self.v[j]);
                out[i * d + j] = match self.kind {
                    "ddpm" => {
                        let step = (tau * self.sched.steps() as f64).round() as usize;
                        let ab = self.sched.alpha_bar[step - 1];
                        (xi - ab.sqrt() * vj) / (1.0 - ab).sqrt()
                    }
                    "edm" => {
                        let sigma = (4.0 * tau).exp();
                        let (cs, co, ci, _) = edm_precond(sigma, self.edm.sigma_data);
                        (vj - cs * xi / ci) / co
                    }
                    _ => (vj - xi) / (1.0 - tau),
                };
            }
        }
        t.constant(&mat(time.len(), d, out))
    }
}

fn ideal(kind: &'static str, v: &[f64]) -> Ideal {
    Ideal {
        v: v.to_vec(),
        kind,
        sched: DdpmSchedule::default(),
        edm: EdmConfig::default(),
    }
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[test]
fn ddpm_schedule_properties() {
    let s = DdpmSchedule::default();
    assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    assert!(*s.alpha_bar.last().unwrap() < 0.05);
    assert!((s.betas[0] - 1e-4).abs() < 1e-15 && (s.betas.last().unwrap() - 0.02).abs() < 1e-15);
    // Independent product.
    let direct: f64 = s.betas.iter().map(|b| 1.0 - b).product();
    assert!((direct - s.alpha_bar.last().unwrap()).abs() < 1e-15);
}

#[test]
fn ddpm_loss_with_true_and_zero_noise_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, d) = (2500, 4);
    let v = mat(b, d, gaussian(&mut rng, b * d));
    let sched = DdpmSchedule::default();
    let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = gaussian(&mut rng, b * d);
    let mut t = Tape::<f64>::inference();
    let cond = t.constant(&Tensor::zeros(vec![b, 1])).unwrap();
    let exact = ConstHead(mat(b, d, eps.clone()));
    let l = ddpm_loss_with(&mut t, &exact, &v, cond, &sched, &steps, &eps).unwrap();
    assert_eq!(t.scalar(l), 0.0);
    let zero = ConstHead(Tensor::zeros(vec![b, d]));
    let l = ddpm_loss(&mut t, &zero, &v, cond, &sched, &mut rng).unwrap();
    assert!((t.scalar(l) - 1.0).abs() < 0.1, "{}", t.scalar(l));
}

#[test]
fn edm_preconditioning_limits_and_errors() {
    let (cs, co, ci, cn) = edm_precond(1e-9, 0.5);
    assert!((cs - 1.0).abs() < 1e-12 && co.abs() < 1e-8);
    assert!((ci - 2.0).abs() < 1e-9 && (cn - (1e-9f64).ln() / 4.0).abs() < 1e-12);
    let mut t = Tape::<f64>::inference();
    let v = mat(1, 2, vec![0.1, 0.2]);
    let cond = t.constant(&Tensor::zeros(vec![1, 1])).unwrap();
    let h = ConstHead(Tensor::zeros(vec![1, 2]));
    for bad in [0.0, -1.0] {
        assert!(matches!(
            edm_loss_with(&mut t, &h, &v, cond, &EdmConfig::default(), &[bad], &[0.0, 0.0]),
            Err(ObjectiveError::InvalidSigma(_))
        ));
    }
}

#[test]
fn edm_loss_ideal_and_zero_denoisers() {
    let cfg = EdmConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vrow = vec![0.3, -0.4, 0.1];
    let b = 8;
    let v = mat(b, 3, vrow.repeat(b));
    let mut t = Tape::<f64>::inference();
    let cond = t.constant(&Tensor::zeros(vec![b, 1])).unwrap();
    let l = edm_loss(&mut t, &ideal("edm", &vrow), &v, cond, &cfg, &mut rng).unwrap();
    assert!(t.scalar(l).abs() < 1e-20);

    // Zero network at sigma = sigma_data: D = x / 2, so D - v = (sigma eps - v) / 2
    // and E[lambda |D - v|^2 / d] = lambda (sigma^2 + |v|^2 / d) / 4.
    let sd = cfg.sigma_data;
    let n = 20000;
    let vrows = mat(n, 3, vrow.repeat(n));
    let cond = t.constant(&Tensor::zeros(vec![n, 1])).unwrap();
    let eps = gaussian(&mut rng, n * 3);
    let zero = ConstHead(Tensor::zeros(vec![n, 3]));
    let l = edm_loss_with(&mut t, &zero, &vrows, cond, &cfg, &vec![sd; n], &eps).unwrap();
    let vsq: f64 = vrow.iter().map(|x| x * x).sum::<f64>() / 3.0;
    let lambda = (sd * sd + sd * sd) / (sd * sd).powi(2);
    let expected = lambda * (sd * sd + vsq) / 4.0;
    // Same draw evaluated directly.
    let direct: f64 = (0..n)
        .map(|i| {
            (0..3)
                .map(|j| {
                    let x = vrow[j] + sd * eps[i * 3 + j];
                    (0.5 * x - vrow[j]).powi(2)
                })
                .sum::<f64>()
                * lambda
                / 3.0
        })
        .sum::<f64>()
        / n as f64;
    assert!((t.scalar(l) - direct).abs() < 1e-9);
    assert!(
        (t.scalar(l) - expected).abs() < 0.03 * expected,
        "{} vs {expected}",
        t.scalar(l)
    );
}

#[test]
fn flow_matching_targets_and_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (b, d) = (2500, 4);
    let vdata: Vec<f64> = gaussian(&mut rng, b * d).iter().map(|x| 0.5 * x).collect();
    let v = mat(b, d, vdata.clone());
    let x0 = gaussian(&mut rng, b * d);
    let times: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let mut t = Tape::<f64>::inference();
    let cond = t.constant(&Tensor::zeros(vec![b, 1])).unwrap();
    let vel: Vec<f64> = vdata.iter().zip(&x0).map(|(a, z)| a - z).collect();
    let l = fm_loss_with(&mut t, &ConstHead(mat(b, d, vel)), &v, cond, &x0, &times).unwrap();
    assert_eq!(t.scalar(l), 0.0);
    let l = fm_loss(&mut t, &ConstHead(Tensor::zeros(vec![b, d])), &v, cond, &mut rng).unwrap();
    let expected = vdata.iter().map(|x| x * x).sum::<f64>() / (b * d) as f64 + 1.0;
    assert!((t.scalar(l) - expected).abs() < 0.1, "{} vs {expected}", t.scalar(l));

    let rec = Recorder(RefCell::new(Vec::new()), 2);
    let v2 = mat(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
    let c2 = t.constant(&Tensor::zeros(vec![2, 1])).unwrap();
    let noise = [9.0, 8.0, 7.0, 6.0];
    fm_loss_with(&mut t, &rec, &v2, c2, &noise, &[0.0, 1.0]).unwrap();
    let (x, tm) = rec.0.borrow()[0].clone();
    assert_eq!(&x[..2], &noise[..2]);
    assert_eq!(&x[2..], &[3.0, 4.0]);
    assert_eq!(tm, vec![0.0, 1.0]);
}

#[test]
fn samplers_recover_a_point_mass_with_ideal_heads() {
    let v = [0.7, -0.2, 0.4];
    let cond = Tensor::<f64>::zeros(vec![5, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let check = |out: Tensor<f64>| {
        for row in out.data().chunks(3) {
            for (a, b) in row.iter().zip(&v) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    };
    check(ddpm_sample(&ideal("ddpm", &v), &cond, &DdpmSchedule::default(), 20, &mut rng).unwrap());
    let short = DdpmSchedule::linear(50, 1e-3, 0.2);
    let head = Ideal {
        sched: short.clone(),
        ..ideal("ddpm", &v)
    };
    check(ddpm_sample(&head, &cond, &short, 50, &mut rng).unwrap());
    check(edm_sample(&ideal("edm", &v), &cond, &EdmConfig::default(), 20, &mut rng).unwrap());
    check(fm_sample(&ideal("fm", &v), &cond, 20, &mut rng).unwrap());
}

fn mlp_head(store: &mut ParamStore<f64>, x_dim: usize, cond_dim: usize) -> ConditionalMlp {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    ConditionalMlp::new(store, "g", x_dim, cond_dim, 8, 4, &mut rng)
}

#[test]
fn every_loss_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut g = |n: usize| -> Vec<f64> { gaussian(&mut rng, n) };
    let d = 5;
    let pos = mat(2, d, g(2 * d));
    let neg = mat(3, d, g(3 * d));
    let h0 = mat(2, d, g(2 * d));
    let owner = [0, 1, 1];

    let f = |t: &mut Tape<f64>, h: Var| -> Result<Var, DiffError> {
        let p = t.constant(&pos)?;
        let n = t.constant(&neg)?;
        pairwise_ce_loss(t, h, p, n, &owner).map_err(obj)
    };
    assert!(grad_check(f, &h0, 1e-5).unwrap() < 1e-5);
    let f = |t: &mut Tape<f64>, h: Var| -> Result<Var, DiffError> {
        let p = t.constant(&pos)?;
        let n = t.constant(&neg)?;
        info_nce_loss(t, h, p, n, &owner, 0.5).map_err(obj)
    };
    assert!(grad_check(f, &h0, 1e-5).unwrap() < 1e-5);
    let f = |t: &mut Tape<f64>, h: Var| -> Result<Var, DiffError> {
        let p = t.constant(&pos)?;
        ar_mse_loss(t, h, p).map_err(obj)
    };
    assert!(grad_check(f, &h0, 1e-5).unwrap() < 1e-5);

    let mut store = ParamStore::new();
    let mlp = mlp_head(&mut store, 3, d);
    let head = HeadRef::new(&mlp, &store, None);
    let v = mat(2, 3, g(6));
    let eps = g(6);
    let sched = DdpmSchedule::default();
    let f = |t: &mut Tape<f64>, c: Var| -> Result<Var, DiffError> {
        ddpm_loss_with(t, &head, &v, c, &sched, &[3, 700], &eps).map_err(obj)
    };
    assert!(grad_check(f, &h0, 1e-5).unwrap() < 1e-5);
    let f = |t: &mut Tape<f64>, c: Var| -> Result<Var, DiffError> {
        edm_loss_with(t, &head, &v, c, &EdmConfig::default(), &[0.1, 2.0], &eps).map_err(obj)
    };
    assert!(grad_check(f, &h0, 1e-5).unwrap() < 1e-5);
    let f = |t: &mut Tape<f64>, c: Var| -> Result<Var, DiffError> {
        fm_loss_with(t, &head, &v, c, &eps, &[0.2, 0.9]).map_err(obj)
    };
    assert!(grad_check(f, &h0, 1e-5).unwrap() < 1e-5);

    let m = tiny_model();
    let targets: [&[u32]; 2] = [&[1, 2, 3, 4], &[5, 6, 7, 8]];
    let h6 = mat(2, 6, g(12));
    let f = |t: &mut Tape<f64>, h: Var| -> Result<Var, DiffError> { recon_loss(t, &m, h, &targets).map_err(obj) };
    assert!(grad_check(f, &h6, 1e-5).unwrap() < 1e-5);
    let s6 = mat(4, 6, g(24));
    let f = |t: &mut Tape<f64>, s: Var| -> Result<Var, DiffError> {
        gen_loss(t, &m, s, &[0..3, 3..4], &targets).map_err(obj)
    };
    assert!(grad_check(f, &s6, 1e-5).unwrap() < 1e-5);
}

#[test]
fn info_nce_matches_softmax_oracle() {
    let h = [1.0, 0.5];
    let pos = [0.3, 0.2];
    let negs = [[0.1, -0.4], [0.9, 0.3]];
    let tau = 0.7;
    let dot = |a: &[f64], b: &[f64]| a[0] * b[0] + a[1] * b[1];
    let s: Vec<f64> = std::iter::once(dot(&h, &pos))
        .chain(negs.iter().map(|n| dot(&h, n)))
        .map(|x| x / tau)
        .collect();
    let z: f64 = s.iter().map(|x| x.exp()).sum();
    let want = -(s[0].exp() / z).ln();
    let mut t = Tape::<f64>::inference();
    let hv = t.constant(&mat(1, 2, h.to_vec())).unwrap();
    let pv = t.constant(&mat(1, 2, pos.to_vec())).unwrap();
    let nv = t.constant(&mat(2, 2, negs.concat())).unwrap();
    let l = info_nce_loss(&mut t, hv, pv, nv, &[0, 0], tau).unwrap();
    assert!((t.scalar(l) - want).abs() < 1e-12);
}
