//! One check per acceptance criterion. Each returns whether it passed and
//! a one-line summary of what was measured.

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cmae::crop::{compute_heatmaps, heatmap_sources, localize, sample_crop, BoundingRect, HeatMap, RandomResizedCrop};
use cmae::datapipe::{make_views, normalized_batch, patchify, synthetic, ImageRecord, PatchSpec, Split};
use cmae::decoder::{param_count, Decoder, DecoderGeometry, DecoderSpec};
use cmae::experiment::{linear_probe, open_split, Checkpoint, MetricsLog, Record, StepInputs, Trainer};
use cmae::experiment::eval::ClassifierSettings;
use cmae::experiment::optim::decays;
use cmae::masking::{keep_count, make_mask, restore_merge, split, MaskBatch};
use cmae::nn::{scalar, ParamStore};
use cmae::objectives::{info_nce, location_loss};
use cmae::rng::{self, Stream};

use super::{cfg, flat, set_element, tiny, trainer};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Central differences of the total loss against the analytic gradient on
/// 100 random parameters of the tiny double-precision model. The detached
/// masked-token features are computed once and held fixed.
pub fn gradient_check() -> Outcome {
    const H: f64 = 1e-5;
    // Relative error denominator floor: below it the comparison is absolute.
    const FLOOR: f64 = 1e-6;
    let start = Instant::now();
    let t = trainer(tiny(&[("crop_warmup_epochs", "never")]));
    let batch = t.prepare(0).unwrap();
    let q2 = t.forward(&batch).unwrap().branches.q2.expect("plan masks tokens");
    let loss_at = |t: &Trainer| -> f64 {
        let out = t.model.forward(&t.state, &batch.inputs(), &t.settings, Some(&q2)).unwrap();
        scalar(&out.total).unwrap()
    };
    let out = t.model.forward(&t.state, &batch.inputs(), &t.settings, Some(&q2)).unwrap();
    let grads = out.total.backward().unwrap();
    let vars = t.state.online.vars();
    let sizes: Vec<usize> = vars.iter().map(|(_, v)| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut worst_at) = (0.0f64, String::new());
    for _ in 0..100 {
        let (mut j, mut vi) = (rng.random_range(0..total), 0);
        while j >= sizes[vi] {
            j -= sizes[vi];
            vi += 1;
        }
        let (name, var) = &vars[vi];
        let analytic = grads.get(var.as_tensor()).map_or(0.0, |g| flat(g)[j]);
        let x0 = flat(var.as_tensor())[j];
        set_element(var, j, x0 + H);
        let lp = loss_at(&t);
        set_element(var, j, x0 - H);
        let lm = loss_at(&t);
        set_element(var, j, x0);
        let numeric = (lp - lm) / (2.0 * H);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        if rel > worst {
            worst = rel;
            worst_at = format!("{name}[{j}] analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst < 1e-4 && secs < 120.0,
        format!("max rel err {worst:.2e} over 100 params ({worst_at}), {secs:.1}s"),
    )
}

fn nonzero(t: &Tensor) -> bool {
    flat(t).iter().any(|v| *v != 0.0)
}

/// Over `steps` training steps: no gradient reaches the momentum copies,
/// view_q's masked pixel tokens, or anything upstream of z_k and q2.
pub fn stop_gradient(steps: usize) -> Outcome {
    let mut t = trainer(tiny(&[("crop_warmup_epochs", "never")]));
    let mut problems = Vec::new();
    for _ in 0..steps {
        let step = t.step;
        let batch = t.prepare(step).unwrap();
        let tq = Var::from_tensor(&batch.tokens_q).unwrap();
        let tk = Var::from_tensor(&batch.tokens_k).unwrap();
        let inputs = StepInputs {
            tokens_q: tq.as_tensor(),
            tokens_k: tk.as_tensor(),
            mask_q: &batch.mask_q,
            mask_k: &batch.mask_k,
        };
        let out = t.model.forward(&t.state, &inputs, &t.settings, None).unwrap();
        let grads = out.total.backward().unwrap();
        for (name, v) in t.state.momentum.vars() {
            if grads.get(v.as_tensor()).is_some_and(nonzero) {
                problems.push(format!("step {step}: momentum `{name}` has a gradient"));
            }
        }
        if grads.get(tk.as_tensor()).is_some_and(nonzero) {
            problems.push(format!("step {step}: view_k tokens have a gradient"));
        }
        let g = grads.get(tq.as_tensor()).expect("view_q tokens receive gradient");
        let (b, n, k) = g.dims3().unwrap();
        let g = flat(g);
        for (i, plan) in batch.mask_q.plans.iter().enumerate() {
            let token_norm = |tok: usize| -> f64 { g[(i * n + tok) * k..(i * n + tok + 1) * k].iter().map(|v| v * v).sum() };
            if plan.masked().iter().any(|&tok| token_norm(tok) != 0.0) {
                problems.push(format!("step {step}: masked token of sample {i} has a gradient"));
            }
            if plan.visible().iter().all(|&tok| token_norm(tok) == 0.0) {
                problems.push(format!("step {step}: no visible token of sample {i} has a gradient"));
            }
        }
        assert_eq!(b, batch.mask_q.batch_size());
        let upstream = [Some(&out.branches.z_k), out.branches.q2.as_ref()];
        for t_out in upstream.into_iter().flatten() {
            let gz = t_out.sum_all().unwrap().backward().unwrap();
            for (name, v) in t.state.online.vars() {
                if gz.get(v.as_tensor()).is_some_and(nonzero) {
                    problems.push(format!("step {step}: detached branch reaches `{name}`"));
                }
            }
        }
        drop(out);
        t.train_step().unwrap();
    }
    let detail = if problems.is_empty() {
        format!("{steps} steps: momentum, q2, z_k and masked-token gradients all zero")
    } else {
        format!("{} violations, first: {}", problems.len(), problems[0])
    };
    Outcome::new(problems.is_empty(), detail)
}

/// Explicit double sum over the batch: mean_i [ log sum_j exp(s_ij/τ) − s_ii/τ ].
pub fn nce_oracle(zq: &[Vec<f64>], zk: &[Vec<f64>], tau: f64) -> f64 {
    let b = zq.len();
    let mut total = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = (0..b)
            .map(|j| zq[i].iter().zip(&zk[j]).map(|(x, y)| x * y).sum::<f64>() / tau)
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total / b as f64
}

fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    let d = rows[0].len();
    Tensor::from_vec(rows.concat(), (rows.len(), d), &Device::Cpu).unwrap()
}

pub fn infonce_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let b = rng.random_range(1..=8);
        let d = rng.random_range(2..=16);
        let tau = rng.random_range(0.05..1.0);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..b)
                .map(|_| {
                    let v = randn(rng, d);
                    if i % 2 == 0 {
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        v.iter().map(|x| x / n).collect()
                    } else {
                        v
                    }
                })
                .collect()
        };
        let (zq, zk) = (draw(&mut rng), draw(&mut rng));
        let got = scalar(&info_nce(&rows_tensor(&zq), &rows_tensor(&zk), tau).unwrap()).unwrap();
        worst = worst.max((got - nce_oracle(&zq, &zk, tau)).abs());
    }
    let mut uniform_err = 0.0f64;
    for b in 1..=8 {
        let z = vec![vec![0.6, 0.8]; b];
        let got = scalar(&info_nce(&rows_tensor(&z), &rows_tensor(&z), 0.2).unwrap()).unwrap();
        uniform_err = uniform_err.max((got - (b as f64).ln()).abs());
    }
    Outcome::new(
        worst < 1e-10 && uniform_err < 1e-9,
        format!("max |err| {worst:.1e} on 50 batches; uniform-logit max |L - ln B| {uniform_err:.1e}"),
    )
}

pub fn mask_restore() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut problems = Vec::new();
    let mut draws = 0;
    while draws < 1000 {
        let n = rng.random_range(1..=256usize);
        let rho: f64 = rng.random_range(0.0..1.0);
        let expected = (n as f64 * (1.0 - rho)).floor() as usize;
        if expected == 0 {
            if make_mask(n, rho, &mut rng).is_ok() {
                problems.push(format!("N={n} rho={rho}: empty visible set accepted"));
            }
            continue;
        }
        draws += 1;
        let plans: Vec<_> = (0..2).map(|_| make_mask(n, rho, &mut rng).unwrap()).collect();
        if plans[0].num_visible != expected {
            problems.push(format!("N={n} rho={rho}: {} visible, expected {expected}", plans[0].num_visible));
            continue;
        }
        let mask = MaskBatch::new(plans, &Device::Cpu).unwrap();
        let tokens = Tensor::from_vec(randn(&mut rng, 2 * n * 3), (2, n, 3), &Device::Cpu).unwrap();
        let parts = split(&tokens, &mask).unwrap();
        let back = restore_merge(&parts.visible, parts.masked.as_ref(), &mask, false).unwrap();
        if flat(&back) != flat(&tokens) {
            problems.push(format!("N={n} rho={rho}: roundtrip differs"));
        }
    }
    let keep = keep_count(64, 0.75);
    Outcome::new(
        problems.is_empty() && keep == 16,
        format!(
            "1000 draws, {} failures; N=64 rho=0.75 keeps {keep}{}",
            problems.len(),
            problems.first().map(|p| format!(" ({p})")).unwrap_or_default()
        ),
    )
}

pub fn location_values() -> Outcome {
    let dev = Device::Cpu;
    let t = Tensor::from_vec(vec![1.0f64, 0.0, 0.0, 0.0], (1, 1, 4), &dev).unwrap();
    let l = |p: &Tensor| scalar(&location_loss(p, &t, false).unwrap()).unwrap();
    let same = l(&t);
    let zero = l(&t.zeros_like().unwrap());
    let uniform = l(&Tensor::full(0.25f64, (1, 1, 4), &dev).unwrap());
    // (1 − 1/4)² + 3·(1/4)² = 3/4
    let oracle = ((1.0f64 - 0.25).powi(2) + 3.0 * 0.25f64.powi(2)).sqrt();
    Outcome::new(
        same.abs() < 1e-10 && (zero - 1.0).abs() < 1e-12 && (uniform - oracle).abs() < 1e-6,
        format!("p=t: {same:.1e}; p=0: {zero}; uniform N=4: {uniform:.6} (oracle {oracle:.6})"),
    )
}

pub const ZOO_KINDS: [&str; 5] = ["transformer", "mlp", "conv", "hybrid_mlp", "hybrid_conv"];
pub const ZOO_DEPTHS: [usize; 4] = [8, 6, 4, 2];
pub const ZOO_DIMS: [usize; 4] = [512, 256, 128, 64];

pub fn zoo_spec(kind: &str, depth: usize, dim: usize) -> DecoderSpec {
    DecoderSpec::new(kind, depth, dim, (dim / 32).max(1))
}

/// Desk geometry: 64 tokens of 8×8×3 pixels from a 192-wide encoder.
pub fn desk_geometry() -> DecoderGeometry {
    DecoderGeometry {
        enc_dim: 192,
        grid: 8,
        token_len: 192,
    }
}

pub fn decoder_zoo() -> Outcome {
    let geo = desk_geometry();
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plans = (0..2).map(|_| make_mask(64, 0.75, &mut rng).unwrap()).collect();
    let mask = MaskBatch::new(plans, &dev).unwrap();
    let feats = Tensor::from_vec(randn(&mut rng, 2 * 16 * 192), (2, 16, 192), &dev)
        .unwrap()
        .to_dtype(DType::F32)
        .unwrap();
    let mut problems = Vec::new();
    let mut built = 0;
    let mut counts = std::collections::BTreeMap::new();
    for kind in ZOO_KINDS {
        for depth in ZOO_DEPTHS {
            for dim in ZOO_DIMS {
                let spec = zoo_spec(kind, depth, dim);
                let store = ParamStore::new(DType::F32, dev.clone(), 0);
                let dec = Decoder::new(&store.scope("decoder", true), &spec, &geo);
                if kind.starts_with("hybrid") && depth < 3 {
                    if dec.is_ok() {
                        problems.push(format!("{kind} depth {depth} accepted"));
                    }
                    continue;
                }
                let dec = dec.unwrap();
                built += 1;
                let out = dec.decode(&feats, &mask).unwrap();
                if out.dims() != [2, 64, 192] || flat(&out).iter().any(|v| !v.is_finite()) {
                    problems.push(format!("{kind}/{depth}/{dim}: output {:?}", out.dims()));
                }
                let counted = store.num_scalars();
                let predicted = param_count(&spec, &geo).unwrap();
                if counted != predicted {
                    problems.push(format!("{kind}/{depth}/{dim}: param_count {predicted}, enumerated {counted}"));
                }
                counts.insert((kind, depth, dim), predicted);
            }
        }
    }
    for kind in ZOO_KINDS {
        for depth in ZOO_DEPTHS {
            let series: Vec<usize> = ZOO_DIMS.iter().filter_map(|&d| counts.get(&(kind, depth, d)).copied()).collect();
            if series.windows(2).any(|w| w[0] <= w[1]) {
                problems.push(format!("{kind} depth {depth}: not decreasing along dims {series:?}"));
            }
        }
        for dim in ZOO_DIMS {
            let series: Vec<usize> = ZOO_DEPTHS.iter().filter_map(|&d| counts.get(&(kind, d, dim)).copied()).collect();
            if series.windows(2).any(|w| w[0] <= w[1]) {
                problems.push(format!("{kind} dim {dim}: not decreasing along depths {series:?}"));
            }
        }
    }
    Outcome::new(
        problems.is_empty(),
        format!(
            "{built} decoders built, shapes/counts/monotonicity {}{}",
            if problems.is_empty() { "all hold" } else { "violated" },
            problems.first().map(|p| format!(": {p}")).unwrap_or_default()
        ),
    )
}

/// Random rectangle inside a `gh × gw` grid.
pub fn random_rect(rng: &mut ChaCha8Rng, gh: usize, gw: usize) -> BoundingRect {
    let (r0, r1) = (rng.random_range(0..gh), rng.random_range(0..gh));
    let (c0, c1) = (rng.random_range(0..gw), rng.random_range(0..gw));
    BoundingRect {
        row_min: r0.min(r1),
        row_max: r0.max(r1),
        col_min: c0.min(c1),
        col_max: c0.max(c1),
    }
}

/// 10⁴ constrained crops: in bounds, centres inside the rectangle unless the
/// fallback fired. Returns `(failures, fallbacks)`.
pub fn crop_bounds(draws: usize) -> (Vec<String>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut problems = Vec::new();
    let mut fallbacks = 0;
    for i in 0..draws {
        let (gh, gw) = (rng.random_range(1..=12usize), rng.random_range(1..=12usize));
        let (h, w) = (gh * 8, gw * 8);
        let rect = random_rect(&mut rng, gh, gw);
        let s = sample_crop((0.2, 1.0), (0.75, 4.0 / 3.0), &rect, 8, w, h, 10, &mut rng);
        if !s.crop.is_within(w, h) {
            problems.push(format!("draw {i}: {:?} outside {w}x{h}", s.crop));
        }
        if s.fallback {
            fallbacks += 1;
            continue;
        }
        let (x_lo, x_hi, y_lo, y_hi) = rect.pixel_extent(8);
        let (cx, cy) = s.crop.center();
        if !(x_lo <= cx && cx <= x_hi && y_lo <= cy && cy <= y_hi) {
            problems.push(format!("draw {i}: centre ({cx},{cy}) outside {rect:?}"));
        }
    }
    (problems, fallbacks)
}

/// Smaller k never yields a smaller rectangle, over 100 random heatmaps.
pub fn localize_monotone(maps: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut problems = Vec::new();
    for i in 0..maps {
        let (gh, gw) = (rng.random_range(1..=12usize), rng.random_range(1..=12usize));
        let raw: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
        let m = HeatMap::from_raw(&raw, gh, gw);
        let mut ks: Vec<f64> = (0..20).map(|_| rng.random_range(0.001..0.999)).collect();
        ks.sort_by(f64::total_cmp);
        for w in ks.windows(2) {
            if !localize(&m, w[0]).contains_rect(&localize(&m, w[1])) {
                problems.push(format!("map {i}: k={} does not contain k={}", w[0], w[1]));
            }
        }
    }
    problems
}

/// Fraction of heatmap mass inside the top-left quadrant.
pub fn top_left_mass(m: &HeatMap) -> f64 {
    let (qh, qw) = (m.grid_h / 2, m.grid_w / 2);
    let total: f64 = m.scores.iter().sum();
    let inside: f64 = (0..qh).flat_map(|r| (0..qw).map(move |c| (r, c))).map(|(r, c)| m.at(r, c)).sum();
    inside / total
}

pub const CORNER_STEPS: u64 = 150;

/// Pretrains a toy model on top-left corner objects and measures where the
/// encoder-feature heatmap of held-out images puts its mass.
pub fn corner_heatmap() -> (f64, f64) {
    let start = Instant::now();
    let c = cfg(&[
        ("data_root", "synthetic:corner:64"),
        ("image_size", "32"),
        ("patch_size", "4"),
        ("encoder_depth", "2"),
        ("encoder_dim", "64"),
        ("encoder_heads", "4"),
        ("proj_dim", "32"),
        ("decoder_depth", "1"),
        ("decoder_dim", "64"),
        ("decoder_heads", "4"),
        ("batch", "16"),
        ("max_steps", &CORNER_STEPS.to_string()),
        ("epochs", "40"),
        ("warmup_epochs", "2"),
        ("crop_warmup_epochs", "never"),
    ]);
    let mut t = trainer(c);
    t.run(&mut MetricsLog::in_memory(), None).unwrap();
    let held_out = synthetic::corner_objects(32, 32, 99, 0);
    let refs: Vec<&ImageRecord> = held_out.iter().collect();
    let images = normalized_batch(&refs, &t.stats, t.cfg.dtype, &t.device).unwrap();
    let encoder = t.model.backbone.encoder(&t.state.online, false).unwrap();
    let source = heatmap_sources().get(&t.cfg.heatmap_source).unwrap();
    let maps = compute_heatmaps(&encoder, &images, &t.model.patch, source.as_ref()).unwrap();
    let mean = maps.iter().map(top_left_mass).sum::<f64>() / maps.len() as f64;
    (mean, start.elapsed().as_secs_f64())
}

pub fn crop_geometry() -> Outcome {
    let (bounds, fallbacks) = crop_bounds(10_000);
    let mono = localize_monotone(100);
    let (mass, secs) = corner_heatmap();
    let pass = bounds.is_empty() && mono.is_empty() && mass >= 0.7 && secs < 300.0;
    Outcome::new(
        pass,
        format!(
            "10^4 crops: {} violations ({fallbacks} fallbacks); monotonicity violations {}; corner heatmap top-left mass {:.1}% after {CORNER_STEPS} steps ({secs:.0}s)",
            bounds.len(),
            mono.len(),
            100.0 * mass
        ),
    )
}

/// Minimal MAE: encoder on visible tokens, decoder, masked MSE against
/// per-patch normalized pixels, AdamW, cosine schedule. Shares only the
/// data pipeline, the encoder/decoder modules and the seed with the
/// trainer. Returns the per-step reconstruction losses.
pub fn minimal_mae(t: &Trainer, steps: u64) -> Vec<f64> {
    let c = &t.cfg;
    let dev = Device::Cpu;
    let store = ParamStore::new(c.dtype, dev.clone(), c.seed);
    let backbone = c.backbone();
    let encoder = |track| backbone.encoder(&store, track).unwrap();
    let decoder = |track| Decoder::new(&store.scope("decoder", track), &c.decoder_spec(), &c.decoder_geometry()).unwrap();
    encoder(true);
    decoder(true);
    let patch = PatchSpec::new(c.patch_size, c.image_size, c.image_size).unwrap();
    let n = patch.num_tokens();
    let data = &t.data;
    let spe = (data.len() / c.batch).max(1) as u64;
    let total = c.max_steps;
    let warm = (c.warmup_epochs * spe as f64).round() as u64;
    let lr_at = |s: u64| -> f64 {
        if s < warm {
            return c.base_lr * s as f64 / warm as f64;
        }
        let p = (s - warm) as f64 / (total - warm).max(1) as f64;
        c.min_lr + (c.base_lr - c.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    };
    let mut moments: std::collections::BTreeMap<String, (Tensor, Tensor, i32)> = Default::default();
    let mut losses = Vec::new();
    for step in 0..steps {
        let epoch = step / spe;
        let mut order: Vec<usize> = (0..data.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng::keyed(c.seed, Stream::Shuffle, &[epoch]));
        let start = (step % spe) as usize * c.batch;
        let idx = &order[start..start + c.batch];
        let batch: Vec<(usize, &ImageRecord)> = idx.iter().map(|&i| (i, &data.records[i])).collect();
        let views = make_views(&batch, &c.aug_policy(t.stats), &RandomResizedCrop, c.seed, epoch, c.dtype, &dev).unwrap();
        let tokens = patchify(&views.view_q, &patch).unwrap();
        let mask = MaskBatch::sample(n, c.mask_ratio, c.seed, step, idx, 0, &dev).unwrap();

        let mut vis_rows = Vec::new();
        let mut weights = vec![0f64; c.batch * n];
        for (b, plan) in mask.plans.iter().enumerate() {
            let ids: Vec<u32> = plan.visible().iter().map(|&v| v as u32).collect();
            let ids = Tensor::from_vec(ids, plan.num_visible, &dev).unwrap();
            vis_rows.push(tokens.get(b).unwrap().index_select(&ids, 0).unwrap());
            for &m in plan.masked() {
                weights[b * n + m] = 1.0;
            }
        }
        let visible = Tensor::stack(&vis_rows, 0).unwrap();
        let enc = encoder(true);
        let feats = enc.encode(&visible, &mask.visible, c.cls_token).unwrap().patch_tokens().unwrap();
        let pred = decoder(true).decode(&feats, &mask).unwrap();

        let target = tokens.detach();
        let k = target.dim(2).unwrap() as f64;
        let mean = target.mean_keepdim(2).unwrap();
        let var = (target.broadcast_sub(&mean).unwrap().sqr().unwrap().sum_keepdim(2).unwrap() / (k - 1.0)).unwrap();
        let target = target.broadcast_sub(&mean).unwrap().broadcast_div(&(var + 1e-6).unwrap().sqrt().unwrap()).unwrap();
        let w = Tensor::from_vec(weights, (c.batch, n, 1), &dev).unwrap().to_dtype(c.dtype).unwrap();
        let sq = (pred - target).unwrap().sqr().unwrap().broadcast_mul(&w).unwrap();
        let denom = (c.batch * mask.num_masked()) as f64 * k;
        let loss = (sq.sum_all().unwrap() / denom).unwrap();
        losses.push(scalar(&loss).unwrap());

        let grads = loss.backward().unwrap();
        let lr = lr_at(step);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let theta = var.as_tensor().detach();
            let (m0, v0, s0) = moments
                .remove(&name)
                .unwrap_or_else(|| (theta.zeros_like().unwrap(), theta.zeros_like().unwrap(), 0));
            let s = s0 + 1;
            let m = ((m0 * c.beta1).unwrap() + (g * (1.0 - c.beta1)).unwrap()).unwrap();
            let v = ((v0 * c.beta2).unwrap() + (g.sqr().unwrap() * (1.0 - c.beta2)).unwrap()).unwrap();
            let mh = (&m / (1.0 - c.beta1.powi(s))).unwrap();
            let vh = (&v / (1.0 - c.beta2.powi(s))).unwrap();
            let decayed = if decays(&name, theta.rank()) {
                (theta * (1.0 - lr * c.weight_decay)).unwrap()
            } else {
                theta
            };
            let upd = (mh / (vh.sqrt().unwrap() + 1e-8).unwrap()).unwrap();
            var.set(&(decayed - (upd * lr).unwrap()).unwrap()).unwrap();
            moments.insert(name, (m, v, s));
        }
    }
    losses
}

pub const MAE_STEPS: u64 = 20;

pub fn mae_degeneration() -> Outcome {
    let c = tiny(&[
        ("lambda_ctr", "0"),
        ("lambda_loc", "0"),
        ("crop_warmup_epochs", "never"),
        ("max_steps", &MAE_STEPS.to_string()),
        ("warmup_epochs", "1"),
        ("base_lr", "1e-2"),
    ]);
    let mut t = trainer(c);
    let baseline = minimal_mae(&t, MAE_STEPS);
    let mut log = MetricsLog::in_memory();
    t.run(&mut log, None).unwrap();
    let mut worst = 0.0f64;
    for (r, b) in log.records.iter().zip(&baseline) {
        if let Record::Step { loss_total, .. } = r {
            worst = worst.max((loss_total - b).abs());
        }
    }
    let moved = (baseline[0] - baseline[baseline.len() - 1]).abs();
    Outcome::new(
        worst < 1e-5 && log.records.len() == baseline.len(),
        format!("{MAE_STEPS} steps, max per-step |L - L_mae| {worst:.1e} (loss moved by {moved:.3})"),
    )
}

pub const SMOKE_STEPS: u64 = 200;
const PROBE_TRAIN: usize = 512;
const PROBE_VAL: usize = 256;

/// Desk-scale model on a 64-image subset of two-class stripes: the total
/// loss must fall by 90% from its first-10-step average to its last-10-step
/// average; then a linear probe on the pretrained encoder must reach 90%
/// on held-out stripes.
pub fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let c = cfg(&[
        ("data_root", "synthetic:stripes:64"),
        ("batch", "16"),
        ("max_steps", &SMOKE_STEPS.to_string()),
        ("epochs", "50"),
        ("warmup_epochs", "5"),
        ("crop_mode", "full"),
        ("flip_prob", "0"),
        ("eval_epochs", "100"),
        ("eval_lr", "1e-2"),
        ("eval_batch", "64"),
    ]);
    let mut t = trainer(c);
    let mut log = MetricsLog::in_memory();
    t.run(&mut log, None).unwrap();
    let totals: Vec<f64> = log
        .records
        .iter()
        .filter_map(|r| match r {
            Record::Step { loss_total, .. } => Some(*loss_total),
            _ => None,
        })
        .collect();
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let first = avg(&totals[..10]);
    let last = avg(&totals[totals.len() - 10..]);
    let drop = 1.0 - last / first;
    let mut probe_cfg = t.cfg.clone();
    probe_cfg.set("data_root", &format!("synthetic:stripes:{PROBE_TRAIN}")).unwrap();
    let train = open_split(&probe_cfg, Split::Train, PROBE_TRAIN).unwrap();
    let val = open_split(&probe_cfg, Split::Val, PROBE_VAL).unwrap();
    let enc = t.model.backbone.encoder(&t.state.online, false).unwrap();
    let (_, top1) = linear_probe(
        &enc,
        &train,
        &val,
        &t.stats,
        &t.model.patch,
        &ClassifierSettings::from_config(&t.cfg),
        t.cfg.dtype,
        &t.device,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        drop >= 0.9 && top1 >= 0.9 && secs < 600.0,
        format!(
            "L_total {first:.3} -> {last:.3} ({:.1}% drop) over {SMOKE_STEPS} steps; 2-class probe top-1 {:.1}% ({PROBE_TRAIN} train / {PROBE_VAL} val); {secs:.0}s",
            100.0 * drop,
            100.0 * top1
        ),
    )
}

fn same_tensors(a: &std::collections::BTreeMap<String, Tensor>, b: &std::collections::BTreeMap<String, Tensor>) -> bool {
    a.len() == b.len()
        && a.iter().all(|(k, t)| {
            b.get(k).is_some_and(|u| {
                let (x, y) = (flat(t), flat(u));
                x.len() == y.len() && x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
            })
        })
}

/// Replays a small run twice and compares the logs; then checks that
/// save/load/step matches an uninterrupted step bit for bit.
pub fn determinism_checkpoint() -> Outcome {
    let c = tiny(&[("crop_warmup_epochs", "1"), ("epochs", "3")]);
    let run = || {
        let mut t = trainer(c.clone());
        let mut log = MetricsLog::in_memory();
        t.run(&mut log, None).unwrap();
        log.records
    };
    let (a, b) = (run(), run());
    let logs_equal = a == b && !a.is_empty();

    // Resume after contrastive cropping has switched on.
    let k = 6;
    let mut straight = trainer(c.clone());
    for _ in 0..k {
        straight.maybe_refresh_crops().unwrap();
        straight.train_step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.safetensors");
    straight.checkpoint().unwrap().save(&path).unwrap();
    straight.maybe_refresh_crops().unwrap();
    let (r1, _) = straight.train_step().unwrap();

    let ckpt = Checkpoint::load(&path, &Device::Cpu).unwrap();
    let mut resumed = trainer(ckpt.config.clone());
    resumed.restore(&ckpt).unwrap();
    resumed.maybe_refresh_crops().unwrap();
    let (r2, _) = resumed.train_step().unwrap();

    let s1 = straight.checkpoint().unwrap();
    let s2 = resumed.checkpoint().unwrap();
    let adam = |c: &Checkpoint| -> std::collections::BTreeMap<String, Tensor> {
        c.adam
            .iter()
            .flat_map(|(k, m)| [(format!("m/{k}"), m.m.clone()), (format!("v/{k}"), m.v.clone())])
            .collect()
    };
    let bit_equal = r1.total.to_bits() == r2.total.to_bits()
        && s1.step == s2.step
        && same_tensors(&s1.online, &s2.online)
        && same_tensors(&s1.momentum, &s2.momentum)
        && same_tensors(&adam(&s1), &adam(&s2))
        && s1.crops == s2.crops;
    Outcome::new(
        logs_equal && bit_equal,
        format!(
            "replayed logs ({} records) identical: {logs_equal}; resume at step {k} bit-identical: {bit_equal}",
            a.len()
        ),
    )
}
