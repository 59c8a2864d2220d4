//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use propot_core::corpus::{generate_synthetic, MaskedTokens, SyntheticSpec, TokenSequence};
use propot_core::evaluation::{average_precision, evaluate, embed_split, mean_average_precision, rank, recall_at_k};
use propot_core::nn::{MultiHeadAttention, ParamStore, TransformerBlock, LN_EPS};
use propot_core::objectives::{mlm_loss, p2i_loss, sdm_loss, similarity_distribution, LossConfig, MlmHead, P2iForm};
use propot_core::prototype::{apa_aggregate, Aggregation, PrototypeConfig, PrototypeModule};
use propot_core::training::build_initial_prototypes;
use propot_core::{Corpus, EmbeddingBatch, Modality, Split, TrainConfig, Trainer};
use rand::Rng as _;
use rand_distr::StandardNormal;

type Check = std::result::Result<String, String>;
type Rng = propot_core::rng::Rng;
type Artifacts = (Vec<u8>, Vec<u8>, Vec<u8>);
type Criterion = (&'static str, &'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(tag: u64) -> Rng {
    propot_core::rng::stream(2024, &[0xacce, tag])
}

fn randn(r: &mut Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect()).collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    let d = rows[0].len();
    Tensor::from_vec(rows.concat(), (rows.len(), d), &Device::Cpu).unwrap()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Randomizes every parameter of a store so gradients are not dominated
/// by the near-zero default initialization.
fn scramble(store: &ParamStore, r: &mut Rng, scale: f64) {
    for p in store.params() {
        let n = p.var.elem_count();
        let base = if p.name.ends_with("ln_attn.weight") || p.name.ends_with("ln_ffn.weight") || p.name.ends_with("ln_memory.weight") || p.name.ends_with("ln.weight") { 1.0 } else { 0.0 };
        let v: Vec<f64> = (0..n).map(|_| base + scale * r.sample::<f64, _>(StandardNormal)).collect();
        p.var.set(&Tensor::from_vec(v, p.var.dims(), &Device::Cpu).unwrap()).unwrap();
    }
}

// ---------------------------------------------------------------- AC1

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;

/// Worst relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)
/// over `vars`, with central differences.
fn gradient_error(vars: &[Var], loss: &dyn Fn() -> Tensor) -> f64 {
    let grads = loss().backward().unwrap();
    let mut worst: f64 = 0.0;
    for var in vars {
        let dims = var.dims().to_vec();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; var.elem_count()],
        };
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut numeric = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + FD_STEP;
            var.set(&Tensor::from_vec(probe.clone(), dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
            let up = scalar(&loss());
            probe[i] = base[i] - FD_STEP;
            var.set(&Tensor::from_vec(probe, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
            let down = scalar(&loss());
            numeric[i] = (up - down) / (2.0 * FD_STEP);
        }
        var.set(&Tensor::from_vec(base, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn var(rows: &[Vec<f64>]) -> Var {
    Var::from_tensor(&tensor(rows)).unwrap()
}

fn ac1_gradients() -> Check {
    let (n, b, d, k) = (3, 4, 8, 2);
    let mut r = rng(1);
    let cfg = LossConfig::default();
    let labels = [0usize, 1, 1, 2];
    let identities = [0usize, 1, 2];
    let v = var(&randn(&mut r, b, d, 1.0));
    let t = var(&randn(&mut r, b, d, 1.0));
    let mut report = Vec::new();

    let e_sdm = gradient_error(&[v.clone(), t.clone()], &|| sdm_loss(v.as_tensor(), t.as_tensor(), &labels, &cfg).unwrap());
    report.push(("sdm", e_sdm));

    let p_v = var(&randn(&mut r, n, d, 1.0));
    let p_t = var(&randn(&mut r, n, d, 1.0));
    let e_p2i = gradient_error(&[v.clone(), t.clone(), p_v.clone(), p_t.clone()], &|| {
        p2i_loss(v.as_tensor(), t.as_tensor(), p_v.as_tensor(), p_t.as_tensor(), &labels, &identities, &cfg).unwrap()
    });
    report.push(("p2i", e_p2i));

    let mut store = ParamStore::new(5, DType::F64);
    let head = MlmHead::new(&mut store, d, 2, 10).unwrap();
    scramble(&store, &mut r, 0.3);
    let len = 6;
    let text = Var::from_tensor(&Tensor::from_vec(randn(&mut r, b * len, d, 1.0).concat(), (b, len, d), &Device::Cpu).unwrap()).unwrap();
    let image = Var::from_tensor(&Tensor::from_vec(randn(&mut r, b * 3, d, 1.0).concat(), (b, 3, d), &Device::Cpu).unwrap()).unwrap();
    let masked: Vec<MaskedTokens> = (0..b)
        .map(|row| MaskedTokens {
            input: TokenSequence { ids: vec![0; len] },
            positions: vec![1 + row % 3, 4],
            targets: vec![(5 + row) as u32 % 10, (row * 3) as u32 % 10],
        })
        .collect();
    let mut mlm_vars = vec![text.clone(), image.clone()];
    mlm_vars.extend(store.params().iter().map(|p| p.var.clone()));
    let e_mlm = gradient_error(&mlm_vars, &|| mlm_loss(&head, &masked, text.as_tensor(), image.as_tensor()).unwrap());
    report.push(("mlm", e_mlm));

    let parts: Vec<Var> = (0..8).map(|_| var(&randn(&mut r, n, d, 0.5))).collect();
    let e_chain = gradient_error(&[parts.clone(), vec![v.clone(), t.clone()]].concat(), &|| {
        let (pv, _) = apa_aggregate(parts[0].as_tensor(), parts[1].as_tensor(), parts[2].as_tensor(), parts[3].as_tensor()).unwrap();
        let (pt, _) = apa_aggregate(parts[4].as_tensor(), parts[5].as_tensor(), parts[6].as_tensor(), parts[7].as_tensor()).unwrap();
        p2i_loss(v.as_tensor(), t.as_tensor(), &pv, &pt, &labels, &identities, &cfg).unwrap()
    });
    report.push(("apa->p2i", e_chain));

    let mut store = ParamStore::new(6, DType::F64);
    let module = PrototypeModule::new(&mut store, n, proto_config(d, 2, k, true, false, false)).unwrap();
    scramble(&store, &mut r, 0.3);
    let pt_v = tensor(&randn(&mut r, n, d, 1.0));
    let pt_t = tensor(&randn(&mut r, n, d, 1.0));
    let ctx = module.context.as_ref().unwrap();
    let e_dpp = gradient_error(&[ctx.ctx_v.clone(), ctx.ctx_t.clone()], &|| {
        let (a_v, a_t) = module.dpp_forward(&pt_v, &pt_t, &identities).unwrap();
        let (pv, _) = module.aggregator.aggregate(&pt_v, &[(propot_core::prototype::Component::Adapted, a_v)]).unwrap();
        let (pt, _) = module.aggregator.aggregate(&pt_t, &[(propot_core::prototype::Component::Adapted, a_t)]).unwrap();
        p2i_loss(v.as_tensor(), t.as_tensor(), &pv, &pt, &labels, &identities, &cfg).unwrap()
    });
    report.push(("dpp->apa->p2i", e_dpp));

    let summary = report.iter().map(|(name, e)| format!("{name} {e:.1e}")).collect::<Vec<_>>().join(", ");
    ensure!(report.iter().all(|(_, e)| *e <= FD_TOL), "relative error above {FD_TOL:e}: {summary}");
    Ok(format!("max relative error: {summary}"))
}

fn proto_config(dim: usize, heads: usize, k: usize, dpp: bool, intra: bool, inter: bool) -> PrototypeConfig {
    PrototypeConfig {
        dim,
        heads,
        context_len: k,
        sae_blocks: 1,
        cad_blocks: 1,
        use_dpp: dpp,
        use_ipp_intra: intra,
        use_ipp_inter: inter,
        aggregation: Aggregation::Apa,
    }
}

// ---------------------------------------------------------------- AC2

fn sdm_oracle(v: &[Vec<f64>], t: &[Vec<f64>], labels: &[usize], tau: f64, eps: f64) -> f64 {
    let b = labels.len();
    let direction = |a: &[Vec<f64>], c: &[Vec<f64>]| {
        let mut total = 0.0;
        for i in 0..b {
            let logits: Vec<f64> = (0..b).map(|j| cosine(&a[i], &c[j]) / tau).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let same = labels.iter().filter(|&&l| l == labels[i]).count() as f64;
            for j in 0..b {
                let p = (logits[j] - m).exp() / z;
                let q = if labels[j] == labels[i] { 1.0 / same } else { 0.0 };
                total += p * (p.ln() - (q + eps).ln());
            }
        }
        total / b as f64
    };
    direction(v, t) + direction(t, v)
}

fn p2i_oracle(v: &[Vec<f64>], t: &[Vec<f64>], p_v: &[Vec<f64>], p_t: &[Vec<f64>], labels: &[usize], tau: f64, literal: bool) -> f64 {
    let mut present = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut total = 0.0;
    for (x, p) in [(v, p_v), (t, p_t)] {
        for &c in &present {
            let logits: Vec<f64> = x.iter().map(|xj| cosine(&p[c], xj) / tau).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let members: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] == c).collect();
            let mut acc = 0.0;
            for &j in &members {
                acc += if literal { logits[j].exp() / z } else { (logits[j].exp() / z).ln() };
            }
            total -= acc / members.len() as f64;
        }
    }
    total
}

fn apa_oracle(pt: &[f64], parts: [&[f64]; 3]) -> (Vec<f64>, [f64; 3]) {
    let e: Vec<f64> = parts.iter().map(|p| dot(pt, p).exp()).collect();
    let z: f64 = e.iter().sum();
    let w = [e[0] / z, e[1] / z, e[2] / z];
    let out = (0..pt.len()).map(|i| pt[i] + w[0] * parts[0][i] + w[1] * parts[1][i] + w[2] * parts[2][i]).collect();
    (out, w)
}

fn layer_norm(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| (v - mean) / (var + LN_EPS).sqrt() * w[i] + b[i]).collect()
}

fn vec1(v: &Var) -> Vec<f64> {
    v.as_tensor().to_vec1::<f64>().unwrap()
}

fn linear(x: &[f64], lin: &propot_core::nn::Linear) -> Vec<f64> {
    let w = rows_of(lin.weight.as_tensor());
    let b = lin.bias.as_ref().map(vec1).unwrap_or_else(|| vec![0.0; w.len()]);
    w.iter().zip(&b).map(|(row, bias)| dot(row, x) + bias).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// softmax(QKᵀ/√d_h)V per head, output projection, residual, then the
/// feed-forward residual, computed row by row.
fn block_oracle(block: &TransformerBlock, x: &[Vec<f64>], memory: Option<&[Vec<f64>]>) -> Vec<Vec<f64>> {
    let ln = |l: &propot_core::nn::LayerNorm, r: &[f64]| layer_norm(r, &vec1(&l.weight), &vec1(&l.bias));
    let normed: Vec<Vec<f64>> = x.iter().map(|r| ln(&block.ln_attn, r)).collect();
    let mem: Vec<Vec<f64>> = match (memory, &block.ln_memory) {
        (Some(m), Some(l)) => m.iter().map(|r| ln(l, r)).collect(),
        _ => normed.clone(),
    };
    let attn: &MultiHeadAttention = &block.attn;
    let q: Vec<Vec<f64>> = normed.iter().map(|r| linear(r, &attn.q)).collect();
    let k: Vec<Vec<f64>> = mem.iter().map(|r| linear(r, &attn.k)).collect();
    let v: Vec<Vec<f64>> = mem.iter().map(|r| linear(r, &attn.v)).collect();
    let d = x[0].len();
    let dh = d / attn.heads;
    let mut out = Vec::with_capacity(x.len());
    for (i, xi) in x.iter().enumerate() {
        let mut ctx = vec![0.0; d];
        for h in 0..attn.heads {
            let span = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = k.iter().map(|kj| dot(&q[i][span.clone()], &kj[span.clone()]) / (dh as f64).sqrt()).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let a = (s - m).exp() / z;
                for c in span.clone() {
                    ctx[c] += a * v[j][c];
                }
            }
        }
        let projected = linear(&ctx, &attn.out);
        let x1: Vec<f64> = xi.iter().zip(&projected).map(|(a, b)| a + b).collect();
        let hidden: Vec<f64> = linear(&ln(&block.ln_ffn, &x1), &block.ffn.up).into_iter().map(gelu).collect();
        let down = linear(&hidden, &block.ffn.down);
        out.push(x1.iter().zip(&down).map(|(a, b)| a + b).collect());
    }
    out
}

fn ac2_equations() -> Check {
    let mut r = rng(2);
    let mut worst_sdm: f64 = 0.0;
    let mut worst_p2i: f64 = 0.0;
    for _ in 0..50 {
        let b = r.random_range(2..=12);
        let d = r.random_range(4..=16);
        let n = r.random_range(1..=b.min(5));
        let labels: Vec<usize> = (0..b).map(|i| if i < n { i } else { r.random_range(0..n) }).collect();
        let tau = r.random_range(0.02..1.0);
        let v = randn(&mut r, b, d, 1.0);
        let t = randn(&mut r, b, d, 1.0);
        let p_v = randn(&mut r, n, d, 1.0);
        let p_t = randn(&mut r, n, d, 1.0);
        let ids: Vec<usize> = (0..n).collect();
        for form in [P2iForm::Log, P2iForm::Literal] {
            let cfg = LossConfig { tau, p2i_form: form, ..LossConfig::default() };
            let got = scalar(&ok(p2i_loss(&tensor(&v), &tensor(&t), &tensor(&p_v), &tensor(&p_t), &labels, &ids, &cfg))?);
            let want = p2i_oracle(&v, &t, &p_v, &p_t, &labels, tau, form == P2iForm::Literal);
            worst_p2i = worst_p2i.max((got - want).abs());
        }
        let cfg = LossConfig { tau, ..LossConfig::default() };
        let got = scalar(&ok(sdm_loss(&tensor(&v), &tensor(&t), &labels, &cfg))?);
        worst_sdm = worst_sdm.max((got - sdm_oracle(&v, &t, &labels, tau, cfg.epsilon)).abs());
    }
    ensure!(worst_sdm <= 1e-10 && worst_p2i <= 1e-10, "sdm {worst_sdm:.1e}, p2i {worst_p2i:.1e}");

    let mut worst_apa: f64 = 0.0;
    let pt = randn(&mut r, 6, 8, 0.7);
    let parts: Vec<Vec<Vec<f64>>> = (0..3).map(|_| randn(&mut r, 6, 8, 0.7)).collect();
    let (p, w) = ok(apa_aggregate(&tensor(&pt), &tensor(&parts[0]), &tensor(&parts[1]), &tensor(&parts[2])))?;
    let (p, w) = (rows_of(&p), rows_of(&w));
    for i in 0..6 {
        let (want_p, want_w) = apa_oracle(&pt[i], [&parts[0][i], &parts[1][i], &parts[2][i]]);
        worst_apa = worst_apa.max(max_diff(&[p[i].clone()], &[want_p])).max(max_diff(&[w[i].clone()], &[want_w.to_vec()]));
    }
    let (p, _) = ok(apa_aggregate(&tensor(&[vec![1.0, 0.0]]), &tensor(&[vec![0.0, 1.0]]), &tensor(&[vec![1.0, 0.0]]), &tensor(&[vec![1.0, 0.0]])))?;
    let (want, _) = apa_oracle(&[1.0, 0.0], [&[0.0, 1.0], &[1.0, 0.0], &[1.0, 0.0]]);
    worst_apa = worst_apa.max(max_diff(&rows_of(&p), &[want]));
    ensure!(worst_apa <= 1e-12, "apa {worst_apa:.1e}");

    // CAD against the hand-rolled attention formula, B=2.
    let (n, d, bsz) = (3, 8, 2);
    let mut store = ParamStore::new(9, DType::F64);
    let module = ok(PrototypeModule::new(&mut store, n, proto_config(d, 2, 2, true, true, true)))?;
    scramble(&store, &mut r, 0.3);
    let pt_v = randn(&mut r, n, d, 1.0);
    let pt_t = randn(&mut r, n, d, 1.0);
    let vb = randn(&mut r, bsz, d, 1.0);
    let tb = randn(&mut r, bsz, d, 1.0);
    let e = ok(module.ipp_forward(&tensor(&pt_v), &tensor(&pt_t), &tensor(&vb), &tensor(&tb)))?;
    let block = &module.cad.as_ref().unwrap().blocks[0];
    let cad_err = [
        (e.p_en_v.as_ref().unwrap(), &pt_v, &vb),
        (e.p_en_t.as_ref().unwrap(), &pt_t, &tb),
        (e.p_eo_v.as_ref().unwrap(), &pt_v, &tb),
        (e.p_eo_t.as_ref().unwrap(), &pt_t, &vb),
    ]
    .iter()
    .map(|(got, q, m)| max_diff(&rows_of(got), &block_oracle(block, q, Some(m))))
    .fold(0.0, f64::max);
    ensure!(cad_err <= 1e-10, "cad oracle {cad_err:.1e}");

    // DPP: [ctx_1..ctx_K, pt] through the SAE step by step, last row.
    let ids = [2usize, 0];
    let (a_v, _) = ok(module.dpp_forward(&tensor(&[pt_v[2].clone(), pt_v[0].clone()]), &tensor(&[pt_t[2].clone(), pt_t[0].clone()]), &ids))?;
    let ctx_v = module.context.as_ref().unwrap().ctx_v.as_tensor().to_vec3::<f64>().unwrap();
    let sae = &module.sae.as_ref().unwrap().blocks[0];
    let mut dpp_err: f64 = 0.0;
    for (row, &id) in ids.iter().enumerate() {
        let mut seq = ctx_v[id].clone();
        seq.push(pt_v[id].clone());
        let out = block_oracle(sae, &seq, None);
        dpp_err = dpp_err.max(max_diff(&[rows_of(&a_v)[row].clone()], &[out.last().unwrap().clone()]));
    }
    ensure!(dpp_err <= 1e-10, "dpp oracle {dpp_err:.1e}");

    Ok(format!(
        "50 batches: sdm {worst_sdm:.1e}, p2i {worst_p2i:.1e} (log and literal); apa {worst_apa:.1e}; cad {cad_err:.1e}; dpp {dpp_err:.1e}"
    ))
}

// ---------------------------------------------------------------- AC3

fn tiny_corpus(ids: usize) -> Corpus {
    generate_synthetic(&SyntheticSpec { n_identities: ids, images_per_identity: 2, captions_per_image: 2, ..SyntheticSpec::default() }).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig { dim: 16, encoder_heads: 2, heads: 2, epochs: 2, batch_size: 8, checkpoint_every: 1, ..TrainConfig::desk() }
}

fn ac3_invariants() -> Check {
    let mut r = rng(3);
    let mut notes = Vec::new();

    let a = tensor(&randn(&mut r, 7, 12, 1.0)).to_dtype(DType::F32).unwrap();
    let b = tensor(&randn(&mut r, 9, 12, 1.0)).to_dtype(DType::F32).unwrap();
    let rows = rows_of(&ok(similarity_distribution(&a, &b, 0.02))?);
    let row_err = rows.iter().map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    ensure!(row_err <= 1e-6, "similarity rows deviate from 1 by {row_err:e}");
    notes.push(format!("rows sum {row_err:.0e}"));

    let (_, w) = ok(apa_aggregate(
        &tensor(&randn(&mut r, 5, 6, 2.0)),
        &tensor(&randn(&mut r, 5, 6, 2.0)),
        &tensor(&randn(&mut r, 5, 6, 2.0)),
        &tensor(&randn(&mut r, 5, 6, 2.0)),
    ))?;
    let w = rows_of(&w);
    ensure!(w.iter().all(|r| r.len() == 3 && r.iter().all(|&x| x >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-12), "APA weights leave the simplex");
    notes.push("APA simplex".into());

    let (bsz, d, n) = (6, 8, 3);
    let labels = [0usize, 0, 1, 2, 2, 1];
    let ids = [0usize, 1, 2];
    let v = randn(&mut r, bsz, d, 1.0);
    let t = randn(&mut r, bsz, d, 1.0);
    let p_v = randn(&mut r, n, d, 1.0);
    let p_t = randn(&mut r, n, d, 1.0);
    let scale = |rows: &[Vec<f64>], r: &mut Rng| -> Vec<Vec<f64>> {
        rows.iter().map(|row| {
            let c = r.random_range(0.1..10.0);
            row.iter().map(|x| x * c).collect()
        }).collect()
    };
    let cfg = LossConfig::default();
    let sdm = |v: &[Vec<f64>], t: &[Vec<f64>]| scalar(&sdm_loss(&tensor(v), &tensor(t), &labels, &cfg).unwrap());
    let p2i = |v: &[Vec<f64>], t: &[Vec<f64>], pv: &[Vec<f64>], pt: &[Vec<f64>]| {
        scalar(&p2i_loss(&tensor(v), &tensor(t), &tensor(pv), &tensor(pt), &labels, &ids, &cfg).unwrap())
    };
    let (vs, ts, pvs, pts) = (scale(&v, &mut r), scale(&t, &mut r), scale(&p_v, &mut r), scale(&p_t, &mut r));
    let sdm_gap = (sdm(&v, &t) - sdm(&vs, &ts)).abs();
    let p2i_gap = (p2i(&v, &t, &p_v, &p_t) - p2i(&vs, &ts, &pvs, &pts)).abs();
    ensure!(sdm_gap <= 1e-10 && p2i_gap <= 1e-10, "scale invariance: sdm {sdm_gap:e}, p2i {p2i_gap:e}");
    notes.push(format!("scale invariance {:.0e}", sdm_gap.max(p2i_gap)));

    // Frozen bank: no gradient reaches the encoders through it, and a
    // training epoch leaves it bit-identical.
    let corpus = tiny_corpus(4);
    let cfg_small = tiny_config();
    let mut trainer = ok(Trainer::new(cfg_small.clone(), &corpus, None, None))?;
    let bank = ok(build_initial_prototypes(&corpus, &trainer.model.encoders, &trainer.vocab, &cfg_small))?;
    let inst = Tensor::randn(0f32, 1.0, (8, 16), &Device::Cpu).unwrap();
    let lbl: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let loss = ok(p2i_loss(&inst, &inst, &bank.pt_v, &bank.pt_t, &lbl, &[0, 1, 2, 3], &LossConfig::default()))?;
    let grads = ok(loss.backward())?;
    ensure!(trainer.model.store.params().iter().all(|p| grads.get(p.var.as_tensor()).is_none()), "gradient reached an encoder parameter through the bank");
    let before = rows_of(&trainer.model.bank.as_ref().unwrap().pt_v);
    ok(trainer.train_epoch())?;
    ensure!(rows_of(&trainer.model.bank.as_ref().unwrap().pt_v) == before, "bank changed during training");
    notes.push("frozen bank".into());

    // Singleton attention: one key gets weight exactly 1 and the CAD
    // readout is that instance's value projection.
    let mut store = ParamStore::new(11, DType::F64);
    let module = ok(PrototypeModule::new(&mut store, n, proto_config(d, 2, 2, true, true, true)))?;
    scramble(&store, &mut r, 0.3);
    let block = &module.cad.as_ref().unwrap().blocks[0];
    let q = tensor(&randn(&mut r, n, d, 1.0)).unsqueeze(0).unwrap();
    let x = randn(&mut r, 1, d, 1.0);
    let mem = tensor(&x).unsqueeze(0).unwrap();
    let ln_attn_q = block.ln_attn.forward(&q).unwrap();
    let ln_mem = block.ln_memory.as_ref().unwrap().forward(&mem).unwrap();
    let (out, weights) = ok(block.attn.forward_with_weights(&ln_attn_q, &ln_mem, None))?;
    let wv = weights.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    ensure!(wv.iter().all(|&w| w == 1.0), "singleton attention weights are not exactly 1");
    let readout = linear(&linear(&rows_of(&ln_mem.squeeze(0).unwrap())[0], &block.attn.v), &block.attn.out);
    let got = rows_of(&out.squeeze(0).unwrap());
    let single_err = got.iter().map(|row| max_diff(std::slice::from_ref(row), std::slice::from_ref(&readout))).fold(0.0, f64::max);
    ensure!(single_err <= 1e-12, "singleton readout differs by {single_err:e}");
    notes.push("singleton attention".into());

    // Shape contracts.
    let k = module.config.context_len;
    let pv = tensor(&randn(&mut r, n, d, 1.0));
    let pt = tensor(&randn(&mut r, n, d, 1.0));
    let (seq_v, seq_t) = ok(module.sae_sequences(&pv, &pt, &ids))?;
    ensure!(seq_v.dims() == [n, k + 1, d] && seq_t.dims() == [n, k + 1, d], "SAE output {:?}", seq_v.dims());
    let (a_v, a_t) = ok(module.dpp_forward(&pv, &pt, &ids))?;
    ensure!(a_v.dims() == [n, d] && a_t.dims() == [n, d], "DPP output {:?}", a_v.dims());
    let last = seq_v.narrow(1, k, 1).unwrap().squeeze(1).unwrap();
    ensure!(rows_of(&last) == rows_of(&a_v), "DPP output is not the last SAE row");
    let e = ok(module.ipp_forward(&pv, &pt, &tensor(&randn(&mut r, 5, d, 1.0)), &tensor(&randn(&mut r, 5, d, 1.0))))?;
    for (name, p) in [("en_v", &e.p_en_v), ("en_t", &e.p_en_t), ("eo_v", &e.p_eo_v), ("eo_t", &e.p_eo_t)] {
        ensure!(p.as_ref().is_some_and(|p| p.dims() == [n, d]), "IPP {name} shape");
    }
    notes.push(format!("DPP ({}x{d} in/out), IPP ({n}x{d})", k + 1));
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------- AC4

fn ac4_metrics() -> Check {
    let mut r = rng(4);
    for case in 0..100 {
        let nq = r.random_range(1..=10);
        let ng = r.random_range(1..=30);
        let d = 4;
        let q_labels: Vec<usize> = (0..nq).map(|_| r.random_range(0..5)).collect();
        let mut g_labels: Vec<usize> = (0..ng).map(|_| r.random_range(0..5)).collect();
        g_labels[0] = q_labels[0];
        let qf = randn(&mut r, nq, d, 1.0);
        let gf = randn(&mut r, ng, d, 1.0);
        let batch = |rows: &[Vec<f64>], labels: &[usize], m| EmbeddingBatch { features: tensor(rows), labels: labels.to_vec(), modality: m };
        let ranked = ok(rank(&batch(&qf, &q_labels, Modality::Text), &batch(&gf, &g_labels, Modality::Image)))?;

        // Brute force: position of j = number of gallery items ahead of it.
        let mut relevance = Vec::new();
        for (i, qi) in qf.iter().enumerate() {
            let s: Vec<f64> = gf.iter().map(|g| cosine(qi, g)).collect();
            let pos: Vec<usize> = (0..ng).map(|j| (0..ng).filter(|&m| s[m] > s[j] || (s[m] == s[j] && m < j)).count()).collect();
            let mut rel = vec![false; ng];
            for j in 0..ng {
                rel[pos[j]] = g_labels[j] == q_labels[i];
            }
            relevance.push(rel);
        }
        ensure!(ranked.relevance == relevance, "case {case}: ranking differs from brute force");
        for k in 1..=ng {
            let want = relevance.iter().filter(|rel| rel.iter().take(k).any(|&x| x)).count() as f64 / nq as f64;
            let got = ok(recall_at_k(&ranked, k))?;
            ensure!(got == want, "case {case}: R@{k} {got} vs {want}");
        }
        let mut aps = Vec::new();
        for rel in &relevance {
            let total = rel.iter().filter(|&&x| x).count();
            if total == 0 {
                continue;
            }
            let mut sum = 0.0;
            let mut seen = 0;
            for (p, &x) in rel.iter().enumerate() {
                if x {
                    seen += 1;
                    sum += seen as f64 / (p + 1) as f64;
                }
            }
            aps.push(sum / total as f64);
        }
        let want = aps.iter().sum::<f64>() / aps.len() as f64;
        let got = ok(mean_average_precision(&ranked))?.map;
        ensure!(got == want, "case {case}: mAP {got} vs {want}");
    }
    let ap = average_precision(&[true, false, true, false, true]).unwrap();
    ensure!((ap - 0.7556).abs() <= 1e-4, "AP example gives {ap}");
    Ok(format!("100 random instances exact; AP(ranks 1,3,5) = {ap:.4}"))
}

// ---------------------------------------------------------------- AC5

fn ac5_overfit() -> Check {
    let corpus = generate_synthetic(&SyntheticSpec { n_identities: 16, images_per_identity: 4, captions_per_image: 2, ..SyntheticSpec::default() }).unwrap();
    let cfg = TrainConfig::desk();
    ensure!(cfg.epochs <= 300 && cfg.dim == 64 && cfg.lambda1 == 0.2, "desk profile outside the criterion");
    ensure!(cfg.use_inipt && cfg.use_dpp && cfg.use_ipp_intra && cfg.use_ipp_inter && cfg.use_mlm, "not the full configuration");
    let started = Instant::now();
    let mut trainer = ok(Trainer::new(cfg.clone(), &corpus, None, None))?;
    let records = ok(trainer.fit())?;
    let seconds = started.elapsed().as_secs_f64();
    let (metrics, _) = ok(evaluate(&corpus, Split::Train, &trainer.model.encoders, &trainer.vocab))?;
    let r1 = metrics.r1.unwrap_or(0.0);

    let protos = ok(trainer.model.full_prototypes(&corpus, &trainer.vocab))?;
    let emb = ok(embed_split(&corpus, Split::Train, &trainer.model.encoders, &trainer.vocab))?;
    let (mut own, mut own_n, mut other, mut other_n) = (0.0, 0usize, 0.0, 0usize);
    for (batch, p) in [(&emb.gallery, &protos.p_v), (&emb.queries, &protos.p_t)] {
        let p = rows_of(p);
        for (x, &label) in rows_of(&batch.features).iter().zip(&batch.labels) {
            for (c, pc) in p.iter().enumerate() {
                let s = cosine(x, pc);
                if c == label {
                    own += s;
                    own_n += 1;
                } else {
                    other += s;
                    other_n += 1;
                }
            }
        }
    }
    let gap = own / own_n as f64 - other / other_n as f64;
    let trend = records.len() >= 50 && records[49].losses.total < records[0].losses.total;
    let detail = format!(
        "{} epochs in {seconds:.0}s: R@1 {r1:.3}, mAP {:.3}, prototype cosine gap {gap:.3}, loss {:.2} -> {:.2}",
        records.len(),
        metrics.map,
        records[0].losses.total,
        records.last().unwrap().losses.total
    );
    ensure!(r1 >= 0.95 && metrics.map >= 0.90 && seconds < 600.0 && gap >= 0.1 && trend, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- AC6

fn ac6_ablation() -> Check {
    let corpus = tiny_corpus(4);
    let mut counts = Vec::new();
    for row in 0..8 {
        let cfg = ok(tiny_config().with_ablation_row(row))?;
        let runnable = [0, 1, 6, 7].contains(&row);
        let mut trainer = ok(Trainer::new(TrainConfig { epochs: 1, ..cfg }, &corpus, None, None))?;
        if runnable {
            let record = ok(trainer.train_epoch())?;
            ensure!(record.losses.total.is_finite(), "row {row} loss not finite");
            let (m, _) = ok(evaluate(&corpus, Split::Train, &trainer.model.encoders, &trainer.vocab))?;
            ensure!(m.map.is_finite(), "row {row} metrics not finite");
        }
        counts.push(trainer.model.parameter_count());
    }
    ensure!(counts[0] < counts[2], "row 0 has {} parameters, row 2 {}", counts[0], counts[2]);
    ensure!(counts[0] == counts[1] && counts[2] < counts[6] && counts[6] < counts[7], "parameter counts {counts:?}");
    Ok(format!("rows 0,1,6,7 trained one epoch; parameters per row {counts:?}"))
}

// ---------------------------------------------------------------- AC7

fn ac7_determinism() -> Check {
    let corpus = tiny_corpus(4);
    let run = |dir: &std::path::Path| -> std::result::Result<Artifacts, String> {
        let mut trainer = ok(Trainer::new(tiny_config(), &corpus, Some(dir), None))?;
        ok(trainer.fit())?;
        let (m, ranked) = ok(evaluate(&corpus, Split::Train, &trainer.model.encoders, &trainer.vocab))?;
        let log = ok(std::fs::read(dir.join(propot_core::training::METRICS_FILE)))?;
        Ok((log, ok(serde_json::to_vec(&ranked))?, ok(serde_json::to_vec(&m))?))
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run(a.path())?;
    let second = run(b.path())?;
    ensure!(first.0 == second.0, "metric logs differ");
    ensure!(first.1 == second.1, "rankings differ");
    ensure!(first.2 == second.2, "metrics differ");
    let ck = |d: &std::path::Path| std::fs::read(d.join("last.ckpt")).unwrap();
    ensure!(ck(a.path()) == ck(b.path()), "checkpoints differ");
    Ok(format!("metric log {} bytes, rankings {} bytes, checkpoints bitwise equal", first.0.len(), first.1.len()))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("AC1", "gradient oracle", ac1_gradients),
        ("AC2", "equation oracles", ac2_equations),
        ("AC3", "invariant suite", ac3_invariants),
        ("AC4", "metric oracles", ac4_metrics),
        ("AC5", "overfit run", ac5_overfit),
        ("AC6", "ablation wiring", ac6_ablation),
        ("AC7", "determinism", ac7_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
