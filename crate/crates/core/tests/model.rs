use karma_core::diffcore::{grad_check, DiffError, Tape, Tensor, Var};
use karma_core::model::checkpoint::SCHEMA_VERSION;
use karma_core::model::{
    capture_attention, read_records_jsonl, time_features, write_records_jsonl, AttentionSource, CaptureInput,
    CaptureSelector, CheckpointError, CheckpointFile, Denoiser, HistoryInput, KarmaModel, ModelConfig, ModelError,
};

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        item_len: 5,
        num_queries: 6,
        visual_dim: 4,
        embed_dim: 8,
        d_model: 16,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 2,
        text_layers: 1,
        ffn_mult: 2,
        max_seq: 6,
        visual_hidden: 12,
        time_features: 4,
        normalize: true,
        use_query: true,
        init_seed: 3,
    }
}

fn items(n: usize, cfg: &ModelConfig) -> Vec<Vec<u32>> {
    (0..n)
        .map(|i| {
            (0..cfg.item_len)
                .map(|j| ((i * 7 + j * 3 + 1) % cfg.vocab_size) as u32)
                .collect()
        })
        .collect()
}

fn refs(v: &[Vec<u32>]) -> Vec<&[u32]> {
    v.iter().map(|x| x.as_slice()).collect()
}

fn unwrap_diff(e: ModelError) -> DiffError {
    match e {
        ModelError::Diff(d) => d,
        other => panic!("unexpected model error {other}"),
    }
}

/// Decoder states (valid rows only) for one history, as f32.
fn states(m: &KarmaModel<f32>, hist: &[Vec<u32>], query: Option<u32>) -> Vec<Vec<f32>> {
    let mut t = Tape::inference();
    let e = m.encoder.forward(&mut t, &m.params, &m.config, &refs(hist)).unwrap();
    let rows: Vec<usize> = (0..hist.len()).collect();
    let out = m
        .decoder
        .forward(
            &mut t,
            &m.params,
            &m.config,
            e.embeddings,
            &[HistoryInput { rows: &rows, query }],
        )
        .unwrap();
    let d = m.config.embed_dim;
    t.value(out.states)[out.valid_rows(0).start * d..out.valid_rows(0).end * d]
        .chunks(d)
        .map(|r| r.to_vec())
        .collect()
}

#[test]
fn item_embeddings_are_deterministic_and_unit_norm() {
    let cfg = tiny();
    let m = KarmaModel::<f32>::new(cfg.clone()).unwrap();
    let its = items(10, &cfg);
    let a = m.embed_items(&refs(&its)).unwrap();
    let b = m.embed_items(&refs(&its)).unwrap();
    assert_eq!(a, b);
    for e in &a {
        assert_eq!(e.len(), cfg.embed_dim);
        let n: f32 = e.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6, "norm {n}");
    }
    // Encoding in a batch matches encoding alone.
    let single = m.embed_items(&[its[3].as_slice()]).unwrap();
    for (x, y) in single[0].iter().zip(&a[3]) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn encoder_rejects_bad_tokens_and_lengths() {
    let cfg = tiny();
    let m = KarmaModel::<f32>::new(cfg.clone()).unwrap();
    let bad = vec![cfg.vocab_size as u32; cfg.item_len];
    assert!(matches!(
        m.embed_items(&[&bad]),
        Err(ModelError::TokenOutOfRange { .. })
    ));
    assert!(matches!(
        m.embed_items(&[&[1, 2]]),
        Err(ModelError::TargetLength { .. })
    ));
}

#[test]
fn decoder_is_strictly_causal() {
    let cfg = tiny();
    let m = KarmaModel::<f32>::new(cfg.clone()).unwrap();
    let its = items(5, &cfg);
    for query in [None, Some(2)] {
        let short = states(&m, &its[..3], query);
        let long = states(&m, &its[..4], query);
        assert_eq!(&long[..short.len()], &short[..], "earlier states changed");
        assert_ne!(long.last(), short.last(), "appending must change h_t");
        // Perturbing position j leaves positions < j unchanged.
        let mut other = its[..4].to_vec();
        other[2] = its[4].clone();
        let pert = states(&m, &other, query);
        let j = 2 + usize::from(query.is_some());
        assert_eq!(&pert[..j], &long[..j]);
        assert_ne!(pert[j], long[j]);
    }
}

#[test]
fn interest_is_a_function_of_inputs_and_unit_norm() {
    let cfg = tiny();
    let m = KarmaModel::<f32>::new(cfg.clone()).unwrap();
    let its = items(4, &cfg);
    let e = m.embed_items(&refs(&its)).unwrap();
    let h1 = m.interest(&e[..3], Some(1)).unwrap();
    let h2 = m.interest(&e[..3], Some(1)).unwrap();
    assert_eq!(h1, h2);
    let n: f32 = h1.iter().map(|x| x * x).sum::<f32>().sqrt();
    assert!((n - 1.0).abs() < 1e-6);
    assert_ne!(h1, m.interest(&e[..3], Some(2)).unwrap(), "query token is live");
    // Length-1 history depends on that item only.
    assert_eq!(m.interest(&e[..1], None).unwrap(), m.interest(&e[..1], None).unwrap());
    assert_ne!(m.interest(&e[..1], None).unwrap(), m.interest(&e[1..2], None).unwrap());
}

#[test]
fn padded_batches_match_single_sequences() {
    let cfg = tiny();
    let m = KarmaModel::<f32>::new(cfg.clone()).unwrap();
    let its = items(6, &cfg);
    let mut t = Tape::inference();
    let e = m.encoder.forward(&mut t, &m.params, &cfg, &refs(&its)).unwrap();
    let (a, b) = ([0usize, 1, 2, 3, 4], [5usize, 1]);
    let out = m
        .decoder
        .forward(
            &mut t,
            &m.params,
            &cfg,
            e.embeddings,
            &[
                HistoryInput {
                    rows: &a,
                    query: Some(0),
                },
                HistoryInput { rows: &b, query: None },
            ],
        )
        .unwrap();
    let h = t.value(out.interest).to_vec();
    let emb = m.embed_items(&refs(&its)).unwrap();
    let ha = m
        .interest(
            &[
                emb[0].clone(),
                emb[1].clone(),
                emb[2].clone(),
                emb[3].clone(),
                emb[4].clone(),
            ],
            Some(0),
        )
        .unwrap();
    let hb = m.interest(&[emb[5].clone(), emb[1].clone()], None).unwrap();
    let d = cfg.embed_dim;
    for (x, y) in h[..d].iter().zip(&ha).chain(h[d..].iter().zip(&hb)) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
    assert_eq!(out.pad, vec![0, 4]);
}

#[test]
fn decoder_errors() {
    let cfg = tiny();
    let m = KarmaModel::<f32>::new(cfg.clone()).unwrap();
    let e = vec![vec![0.1f32; cfg.embed_dim]; cfg.max_seq + 1];
    assert!(matches!(m.interest(&[], None), Err(ModelError::EmptyHistory)));
    assert!(matches!(m.interest(&e, None), Err(ModelError::HistoryTooLong { .. })));
    assert!(matches!(
        m.interest(&e[..2], Some(cfg.num_queries as u32)),
        Err(ModelError::QueryOutOfRange(_))
    ));
}

fn logits_for(m: &KarmaModel<f32>, cond: &[f32], target: &[u32]) -> Vec<f32> {
    let mut t = Tape::inference();
    let d = m.config.embed_dim;
    let c = t
        .constant(&Tensor::matrix(cond.len() / d, d, cond.to_vec()).unwrap())
        .unwrap();
    let l = m.text_logits(&mut t, c, &[0..cond.len() / d], &[target]).unwrap();
    t.value(l).to_vec()
}

#[test]
fn text_head_is_causal_in_the_target() {
    let cfg = tiny();
    let m = KarmaModel::<f32>::new(cfg.clone()).unwrap();
    let cond: Vec<f32> = (0..3 * cfg.embed_dim).map(|i| (i as f32 * 0.37).sin()).collect();
    let target = items(1, &cfg).remove(0);
    let base = logits_for(&m, &cond, &target);
    let v = cfg.vocab_size;
    assert_eq!(base.len(), cfg.item_len * v);
    for l in 0..cfg.item_len {
        let mut changed = target.clone();
        changed[l] = (changed[l] + 1) % v as u32;
        let out = logits_for(&m, &cond, &changed);
        assert_eq!(&out[..(l + 1) * v], &base[..(l + 1) * v], "position {l}");
        if l + 1 < cfg.item_len {
            assert_ne!(&out[(l + 1) * v..], &base[(l + 1) * v..]);
        }
    }
}

#[test]
fn untrained_cross_entropy_is_near_uniform() {
    let cfg = ModelConfig::default();
    let m = KarmaModel::<f32>::new(cfg.clone()).unwrap();
    let its = items(8, &cfg);
    let e = m.embed_items(&refs(&its)).unwrap();
    let mut t = Tape::inference();
    let flat: Vec<f32> = e.concat();
    let c = t.constant(&Tensor::matrix(8, cfg.embed_dim, flat).unwrap()).unwrap();
    let groups: Vec<_> = (0..8).map(|i| i..i + 1).collect();
    let logits = m.text_logits(&mut t, c, &groups, &refs(&its)).unwrap();
    let tgt: Vec<usize> = its.iter().flatten().map(|&w| w as usize).collect();
    let ce = t.cross_entropy(logits, &tgt).unwrap();
    let ln_v = (cfg.vocab_size as f32).ln();
    let got = t.scalar(ce);
    assert!((got - ln_v).abs() < 0.1 * ln_v, "CE {got} vs ln V {ln_v}");
}

#[test]
fn embedding_conditioned_logits_depend_only_on_the_vector() {
    let cfg = tiny();
    let m = KarmaModel::<f32>::new(cfg.clone()).unwrap();
    let its = items(4, &cfg);
    let target = &its[3];
    let emb = m.embed_items(&refs(&its)).unwrap();
    let h = m.interest(&emb[..3], Some(1)).unwrap();

    // Same vector through the live decoder path and as a bare constant.
    let mut t = Tape::inference();
    let e = m.encoder.forward(&mut t, &m.params, &cfg, &refs(&its[..3])).unwrap();
    let rows = [0usize, 1, 2];
    let out = m
        .decoder
        .forward(
            &mut t,
            &m.params,
            &cfg,
            e.embeddings,
            &[HistoryInput {
                rows: &rows,
                query: Some(1),
            }],
        )
        .unwrap();
    let live = m.text_logits(&mut t, out.interest, &[0..1], &[target]).unwrap();
    let live = t.value(live).to_vec();
    let detached = logits_for(&m, &h, target);
    for (a, b) in live.iter().zip(&detached) {
        assert!((a - b).abs() < 1e-5);
    }
    let zero = logits_for(&m, &vec![0.0; cfg.embed_dim], target);
    assert_ne!(zero, detached, "conditioning must be live");
}

#[test]
fn reconstruction_gradient_reaches_the_interest_vector() {
    let mut cfg = tiny();
    cfg.normalize = false;
    let m = KarmaModel::<f64>::new(cfg.clone()).unwrap();
    let target: Vec<u32> = items(1, &cfg).remove(0);
    let tgt: Vec<usize> = target.iter().map(|&w| w as usize).collect();
    let h = Tensor::from_fn(vec![1, cfg.embed_dim], |i| (i as f64 * 0.7).cos() * 0.5);
    let f = |t: &mut Tape<f64>, x: Var| -> Result<Var, DiffError> {
        let l = m.text_logits(t, x, &[0..1], &[&target]).map_err(unwrap_diff)?;
        t.cross_entropy(l, &tgt)
    };
    let mut t = Tape::new();
    let x = t.input(&h).unwrap();
    let loss = f(&mut t, x).unwrap();
    let g = t.backward(loss).unwrap();
    let norm: f64 = g.get(x).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 1e-8, "gradient norm {norm}");
    let err = grad_check(f, &h, 1e-5).unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn visual_head_contracts() {
    let cfg = tiny();
    let m = KarmaModel::<f32>::new(cfg.clone()).unwrap();
    let head = m.visual_head();
    let run = |x: &[f32], c: &[f32], tau: f32| -> Vec<f32> {
        let mut t = Tape::inference();
        let xv = t
            .constant(&Tensor::matrix(1, cfg.visual_dim, x.to_vec()).unwrap())
            .unwrap();
        let cv = t
            .constant(&Tensor::matrix(1, cfg.embed_dim, c.to_vec()).unwrap())
            .unwrap();
        let out = head.predict(&mut t, xv, cv, &[tau]).unwrap();
        t.value(out).to_vec()
    };
    let x = vec![0.3, -0.2, 0.5, 0.1];
    let c: Vec<f32> = (0..cfg.embed_dim).map(|i| i as f32 * 0.1).collect();
    let a = run(&x, &c, 0.5);
    assert_eq!(a.len(), cfg.visual_dim);
    assert_eq!(a, run(&x, &c, 0.5));
    let c2: Vec<f32> = c.iter().map(|v| -v).collect();
    assert_ne!(a, run(&x, &c2, 0.5));
    assert_ne!(run(&x, &c, 0.0), run(&x, &c, 1.0));
    assert_eq!(m.counters().visual_calls(), 5);

    let mut t = Tape::<f32>::inference();
    let bad = t.constant(&Tensor::zeros(vec![1, 3])).unwrap();
    let cv = t.constant(&Tensor::zeros(vec![1, cfg.embed_dim])).unwrap();
    assert!(matches!(
        head.predict(&mut t, bad, cv, &[0.0]),
        Err(DiffError::Shape { .. })
    ));
}

#[test]
fn time_features_separate_grid_points() {
    let f0 = time_features(0.0f64, 16);
    let f1 = time_features(1.0f64, 16);
    assert_eq!(&f0[..8], &[0.0; 8]);
    assert_eq!(&f0[8..], &[1.0; 8]);
    assert_ne!(f0, f1);
    let grid: Vec<Vec<f64>> = (0..=100).map(|i| time_features(i as f64 / 100.0, 16)).collect();
    for i in 0..grid.len() {
        for j in i + 1..grid.len() {
            assert_ne!(grid[i], grid[j]);
        }
    }
}

#[test]
fn inference_path_never_touches_heads() {
    let cfg = tiny();
    let m = KarmaModel::<f32>::new(cfg.clone()).unwrap();
    let its = items(4, &cfg);
    let e = m.embed_items(&refs(&its)).unwrap();
    m.interest(&e, Some(0)).unwrap();
    capture_attention(&m, &CaptureInput::Items(&refs(&its)), &CaptureSelector::all()).unwrap();
    assert_eq!(m.counters().total(), 0);
}

#[test]
fn attention_capture_records() {
    let cfg = tiny();
    let m = KarmaModel::<f32>::new(cfg.clone()).unwrap();
    let its = items(4, &cfg);
    let r = refs(&its);
    let enc = capture_attention(&m, &CaptureInput::Items(&r[..2]), &CaptureSelector::all()).unwrap();
    assert_eq!(enc.len(), 2 * cfg.encoder_layers * cfg.heads);
    let dec = capture_attention(
        &m,
        &CaptureInput::History {
            items: &r,
            query: Some(1),
        },
        &CaptureSelector {
            layers: Some(vec![1]),
            heads: None,
        },
    )
    .unwrap();
    assert_eq!(dec.len(), cfg.heads);
    for rec in enc.iter().chain(&dec) {
        rec.validate(1e-6).unwrap();
    }
    for rec in &dec {
        assert_eq!(rec.source, AttentionSource::UserDecoder);
        assert_eq!(rec.rows.len(), 5);
        for (i, row) in rec.rows.iter().enumerate() {
            assert!(row[i + 1..].iter().all(|&p| p == 0.0));
        }
    }
    let mut buf = Vec::new();
    write_records_jsonl(&mut buf, &enc).unwrap();
    write_records_jsonl(&mut buf, &dec).unwrap();
    let back = read_records_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, [enc, dec].concat());

    let err = capture_attention(
        &m,
        &CaptureInput::Items(&r),
        &CaptureSelector {
            layers: Some(vec![cfg.encoder_layers]),
            heads: None,
        },
    );
    assert!(matches!(err, Err(ModelError::Selector(_))));
    let err = capture_attention(
        &m,
        &CaptureInput::Items(&r),
        &CaptureSelector {
            layers: None,
            heads: Some(vec![cfg.heads]),
        },
    );
    assert!(matches!(err, Err(ModelError::Selector(_))));
}

fn checkpoint_of(m: &KarmaModel<f32>) -> CheckpointFile {
    CheckpointFile {
        meta: serde_json::json!({ "model": m.config }),
        tensors: m.export_params("param/"),
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = tiny();
    let m = KarmaModel::<f32>::new(cfg.clone()).unwrap();
    let bytes = checkpoint_of(&m).to_bytes();
    let file = CheckpointFile::from_bytes(&bytes).unwrap();
    assert_eq!(file.model_config().unwrap(), cfg);
    let mut other = KarmaModel::<f32>::new(ModelConfig { init_seed: 99, ..cfg }).unwrap();
    assert_ne!(checkpoint_of(&other).to_bytes()[..], bytes[..]);
    other.import_params(&file, "param/").unwrap();
    let mut again = checkpoint_of(&other);
    again.meta = file.meta.clone();
    assert_eq!(again.to_bytes(), bytes);
}

#[test]
fn checkpoint_rejects_corruption_without_partial_load() {
    let cfg = tiny();
    let m = KarmaModel::<f32>::new(cfg.clone()).unwrap();
    let bytes = checkpoint_of(&m).to_bytes();

    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&(SCHEMA_VERSION + 1).to_le_bytes());
    assert!(matches!(
        CheckpointFile::from_bytes(&bad),
        Err(CheckpointError::VersionMismatch { found, .. }) if found == SCHEMA_VERSION + 1
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        CheckpointFile::from_bytes(&bad),
        Err(CheckpointError::BadMagic)
    ));
    for cut in [3, 10, 30, bytes.len() - 1] {
        assert!(matches!(
            CheckpointFile::from_bytes(&bytes[..cut]),
            Err(CheckpointError::Truncated(_))
        ));
    }

    // A model of a different width must refuse the file and stay untouched.
    let mut wide = KarmaModel::<f32>::new(ModelConfig { d_model: 24, ..cfg }).unwrap();
    let before = checkpoint_of(&wide).to_bytes();
    let file = CheckpointFile::from_bytes(&bytes).unwrap();
    assert!(matches!(
        wide.import_params(&file, "param/"),
        Err(CheckpointError::Shape { .. })
    ));
    assert_eq!(checkpoint_of(&wide).to_bytes(), before);

    let mut missing = file.clone();
    missing.tensors.pop();
    let mut target = KarmaModel::<f32>::new(tiny()).unwrap();
    assert!(matches!(
        target.import_params(&missing, "param/"),
        Err(CheckpointError::Missing(_))
    ));
    let mut extra = file.clone();
    extra.tensors.push(("param/ghost".into(), Tensor::zeros(vec![1, 1])));
    assert!(matches!(
        target.import_params(&extra, "param/"),
        Err(CheckpointError::Unexpected(_))
    ));
}
