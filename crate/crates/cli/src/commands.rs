use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use geomlens_core::attention::{argmax_locality_ratio, attention_matrix, dissect_weights, qk_decompose, MuMode};
use geomlens_core::fourier::{dct2, finite_difference, gram, thm1_verify};
use geomlens_core::geometry::pca_projection;
use geomlens_core::kernel::{run_thm2_trials, Thm2Config};
use geomlens_core::report::{run_ood_report, run_report, Report, RunConfig};
use geomlens_core::synthetic::{generate, PlantedSpec};
use geomlens_core::tensor_io::{read_container, read_header, write_container, DType, Kind};
use geomlens_core::{cross_layer_stats, decompose, AttentionWeights, Error, PositionalBasisMatrix};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::output::{emit, emit_json, load_embeddings, load_positional, matrix_csv, table_csv, write_matrix};
use crate::{
    Cli, Command, CrossLayerArgs, DecomposeArgs, FourierArgs, MuModeArg, OnOff, Partial, PcaArgs, QkArgs, ReportArgs,
    SynthArgs, Thm1Args, Thm2Args, VerifyCommand, WeightsArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    let dtype = DType::from(cli.precision);
    match &cli.command {
        Command::Decompose(a) => decompose_cmd(a, dtype),
        Command::Report(a) => report_cmd(a, cli.seed, false),
        Command::OodReport(a) => report_cmd(a, cli.seed, true),
        Command::Fourier(a) => fourier_cmd(a),
        Command::Qk(a) => qk_cmd(a, dtype),
        Command::Weights(a) => weights_cmd(a),
        Command::Pca(a) => pca_cmd(a, cli.seed),
        Command::Synth(a) => synth_cmd(a, cli.seed, dtype),
        Command::Verify(VerifyCommand::Thm1(a)) => thm1_cmd(a),
        Command::Verify(VerifyCommand::Thm2(a)) => thm2_cmd(a, cli.seed),
        Command::CrossLayer(a) => cross_layer_cmd(a),
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidInput(msg.into()).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn decompose_cmd(a: &DecomposeArgs, dtype: DType) -> Result<()> {
    let e = load_embeddings(&a.input, a.trim.keep_first_token)?;
    let dec = decompose(&e)?;
    create_dir(&a.out)?;
    dec.write_to_dir(&a.out, dtype)?;
    Ok(())
}

fn report_cmd(a: &ReportArgs, seed: u64, ood: bool) -> Result<()> {
    let cfg = RunConfig {
        drop_first_token: !a.trim.keep_first_token,
        skip_final_layer: !a.keep_final_layer,
        include_layer0: !a.exclude_layer0,
        ks: a.ks.clone(),
        seed,
        sample_sequences: a.sample,
        ..RunConfig::new(a.inputs.clone())
    };
    let report: Report = if ood { run_ood_report(&cfg)? } else { run_report(&cfg)? };
    let csv = if ood { report.to_ood_csv() } else { report.to_csv() };
    emit(a.out.as_deref(), &csv)?;
    if let Some(p) = &a.json {
        emit_json(p, &report.to_json())?;
    }
    if let Some(p) = &a.spectral {
        emit(Some(p), &report.spectral_csv())?;
    }
    if !report.failures.is_empty() {
        let names: Vec<String> = report.failures.iter().map(|f| f.path.display().to_string()).collect();
        return Err(Partial(format!("{} layer(s) failed: {}", names.len(), names.join(", "))).into());
    }
    Ok(())
}

fn fourier_cmd(a: &FourierArgs) -> Result<()> {
    let p = load_positional(&a.input, a.trim.keep_first_token)?;
    let bundle = gram(&PositionalBasisMatrix::new(p))?;
    let summary = dct2(&bundle.g, &a.ks)?;
    let records = summary.ratios.iter().map(|(k, r)| vec![k.to_string(), r.to_string()]);
    emit(a.out.as_deref(), &table_csv(&["K", "r_K"], records)?)?;
    if let Some(m) = a.m {
        let (_, max) = finite_difference(&bundle.g_ext, m)?;
        eprintln!("finite difference max-norm (m={m}): {max}");
    }
    Ok(())
}

fn qk_cmd(a: &QkArgs, dtype: DType) -> Result<()> {
    let e = load_embeddings(&a.emb, a.trim.keep_first_token)?;
    let w = AttentionWeights::from_containers(&read_container(&a.wq)?, &read_container(&a.wk)?)?;
    let dec = decompose(&e)?;
    let mode = match a.mu_mode {
        MuModeArg::Exclude => MuMode::Exclude,
        MuModeArg::Fold => MuMode::FoldIntoPos,
    };
    let q = qk_decompose(&dec, &w, a.seq, mode)?;
    let attn = attention_matrix(&q.full, a.causal);
    create_dir(&a.out)?;
    for (name, m) in [("full", &q.full), ("pp", &q.pp), ("pc", &q.pc), ("cp", &q.cp), ("cc", &q.cc), ("attn", &attn)] {
        write_matrix(&a.out.join(format!("{name}.gt")), m, dtype)?;
        emit(Some(&a.out.join(format!("{name}.csv"))), &matrix_csv(m)?)?;
    }
    let locality = |m: &DMatrix<f64>| argmax_locality_ratio(m, a.causal).ok();
    let summary = json!({
        "seq": a.seq,
        "causal": a.causal,
        "mu_mode": mode,
        "layer": w.layer,
        "head": w.head,
        "argmax_locality_pp": locality(&q.pp),
        "argmax_locality_full": locality(&q.full),
    });
    emit_json(&a.out.join("summary.json"), &summary)
}

/// `(layer, head)` → `(weight_q, weight_k)` paths.
type HeadPairs = BTreeMap<(u64, u64), (PathBuf, PathBuf)>;

/// Pairs `weight_q` / `weight_k` containers by `(layer, head)`.
fn collect_heads(dir: &Path) -> Result<(HeadPairs, Vec<String>)> {
    let mut q = BTreeMap::new();
    let mut k = BTreeMap::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries.into_iter().filter(|p| p.extension().is_some_and(|e| e == "gt")) {
        let h = read_header(&path).with_context(|| format!("reading {}", path.display()))?;
        let key = |name| h.get(name).and_then(|v| v.as_u64()).unwrap_or(0);
        let id = (key("layer"), key("head"));
        match h.kind {
            Kind::WeightQ => q.insert(id, path),
            Kind::WeightK => k.insert(id, path),
            _ => None,
        };
    }
    let mut missing = Vec::new();
    let mut pairs = BTreeMap::new();
    for (id, qp) in q {
        match k.remove(&id) {
            Some(kp) => {
                pairs.insert(id, (qp, kp));
            }
            None => missing.push(format!("layer {} head {}: no weight_k", id.0, id.1)),
        }
    }
    missing.extend(k.keys().map(|id| format!("layer {} head {}: no weight_q", id.0, id.1)));
    Ok((pairs, missing))
}

fn weights_cmd(a: &WeightsArgs) -> Result<()> {
    if !(a.quantile > 0.0 && a.quantile < 1.0) {
        return Err(invalid("quantile must lie in (0, 1)"));
    }
    let pb = PositionalBasisMatrix::new(load_positional(&a.p, a.trim.keep_first_token)?);
    let (pairs, mut problems) = collect_heads(&a.w_dir)?;
    if pairs.is_empty() {
        return Err(invalid(format!("no weight_q/weight_k pairs in {}", a.w_dir.display())));
    }
    let mut records = Vec::new();
    for ((layer, head), (qp, kp)) in &pairs {
        let result = AttentionWeights::from_containers(&read_container(qp)?, &read_container(kp)?)
            .and_then(|w| dissect_weights(&w, &pb, a.k, a.quantile));
        let ws = match result {
            Ok(ws) => ws,
            Err(e @ Error::NumericalFailure(_)) => return Err(e.into()),
            Err(e) => {
                log::warn!("layer {layer} head {head}: {e}");
                problems.push(format!("layer {layer} head {head}: {e}"));
                continue;
            }
        };
        let diag_abs_mean = ws.d.iter().map(|x| x.abs()).sum::<f64>() / ws.d.len() as f64;
        records.push(vec![
            layer.to_string(),
            head.to_string(),
            ws.k.to_string(),
            ws.k_clipped_from.unwrap_or(ws.k).to_string(),
            ws.threshold.to_string(),
            ws.energy_fraction.to_string(),
            diag_abs_mean.to_string(),
            ws.l.norm().to_string(),
            ws.noise.norm().to_string(),
        ]);
    }
    let header =
        ["layer", "head", "k", "k_requested", "threshold", "energy_fraction", "diag_abs_mean", "l_norm", "noise_norm"];
    emit(a.out.as_deref(), &table_csv(&header, records)?)?;
    if !problems.is_empty() {
        return Err(Partial(problems.join("; ")).into());
    }
    Ok(())
}

fn pca_cmd(a: &PcaArgs, seed: u64) -> Result<()> {
    let e = load_embeddings(&a.input, a.trim.keep_first_token)?;
    let dec = decompose(&e)?;
    let [c, t, d] = dec.dims();
    let n = a.samples.min(c * t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, c * t, n).into_vec();
    idx.sort_unstable();
    let mut samples = DMatrix::zeros(n, d);
    for (row, &i) in idx.iter().enumerate() {
        samples.set_row(row, &dec.cvec(i / t, i % t).transpose());
    }
    let proj = pca_projection(&dec.pos, &samples)?;
    if let Some(w) = &proj.warning {
        eprintln!("warning: {w}");
    }
    let point = |kind: &str, index: usize, m: &DMatrix<f64>, row: usize| {
        vec![kind.to_owned(), index.to_string(), m[(row, 0)].to_string(), m[(row, 1)].to_string()]
    };
    let records = (0..t)
        .map(|ti| point("pos", ti, &proj.pos_coords, ti))
        .chain(idx.iter().enumerate().map(|(row, &i)| point("cvec", i, &proj.cvec_coords, row)));
    emit(a.out.as_deref(), &table_csv(&["kind", "index", "x", "y"], records)?)
}

fn synth_cmd(a: &SynthArgs, seed: u64, dtype: DType) -> Result<()> {
    if a.layers == 0 {
        return Err(invalid("--layers must be at least 1"));
    }
    let base = PlantedSpec::new(a.c, a.t, a.d);
    let spec_for = |layer: usize| PlantedSpec {
        pos_rank: a.rank.unwrap_or(base.pos_rank),
        n_clusters: a.clusters,
        cluster_radius: a.radius,
        cluster_spread: a.spread,
        orthogonalize_clusters: !a.no_orthogonalize,
        noise_sigma: a.sigma,
        mu_scale: a.mu_scale,
        seed: seed.wrapping_add(layer as u64),
        ..base.clone()
    };
    let targets: Vec<(PathBuf, PathBuf)> = if a.layers == 1 {
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "synth".into());
        vec![(a.out.clone(), a.out.with_file_name(format!("{stem}_truth")))]
    } else {
        create_dir(&a.out)?;
        (0..a.layers)
            .map(|l| (a.out.join(format!("layer{l:02}.gt")), a.out.join(format!("layer{l:02}_truth"))))
            .collect()
    };
    for (layer, (file, truth_dir)) in targets.iter().enumerate() {
        let spec = spec_for(layer);
        let planted = generate(&spec)?;
        let mut e = planted.embeddings;
        e.layer = layer;
        write_container(&e.to_container(dtype)?, file).with_context(|| format!("cannot write {}", file.display()))?;
        create_dir(truth_dir)?;
        planted.truth.write_to_dir(truth_dir, dtype)?;
        write_matrix(&truth_dir.join("directions.gt"), &planted.directions, dtype)?;
        emit_json(&truth_dir.join("spec.json"), &serde_json::to_value(&spec)?)?;
    }
    Ok(())
}

fn thm1_cmd(a: &Thm1Args) -> Result<()> {
    let p = load_positional(&a.input, a.trim.keep_first_token)?;
    let cert = thm1_verify(&PositionalBasisMatrix::new(p), a.k, a.m)?;
    println!("holds={} lhs={} rhs={} k={} m={} T={}", cert.holds, cert.lhs, cert.rhs, cert.k, cert.m, cert.t);
    if let Some(p) = &a.json {
        emit_json(p, &serde_json::to_value(&cert)?)?;
    }
    Ok(())
}

fn thm2_cmd(a: &Thm2Args, seed: u64) -> Result<()> {
    let incoh = match (a.incoh, a.gamma) {
        (Some(i), _) => i,
        (None, Some(g)) => Thm2Config::incoh_from_gamma(a.d, g),
        (None, None) => bail!(invalid("one of --incoh or --gamma is required")),
    };
    let mut cfg = Thm2Config::new(a.d, a.s, incoh, a.trials, a.noise == OnOff::On, seed);
    cfg.c_z = a.c_z;
    if let Some(n) = a.n {
        cfg.n1 = n;
        cfg.n2 = n;
    }
    let summary = run_thm2_trials(&cfg)?;
    println!(
        "holds {}/{} max_gap={} max_gap/bound={} failure_fraction={}",
        summary.n_holds, cfg.trials, summary.max_gap, summary.max_ratio, summary.failure_fraction
    );
    if let Some(p) = &a.json {
        emit_json(p, &serde_json::to_value(&summary)?)?;
    }
    Ok(())
}

fn cross_layer_cmd(a: &CrossLayerArgs) -> Result<()> {
    let mut layers = a
        .inputs
        .iter()
        .map(|p| load_embeddings(p, a.trim.keep_first_token))
        .collect::<Result<Vec<_>>>()?;
    layers.sort_by_key(|e| e.layer);
    let stats = cross_layer_stats(&layers)?;
    let mut header = vec!["layer".to_owned(), "mean_norm".to_owned()];
    header.extend(layers.iter().map(|e| format!("cos_{}", e.layer)));
    let records = layers.iter().enumerate().map(|(i, e)| {
        let mut r = vec![e.layer.to_string(), stats.mean_norms[i].to_string()];
        r.extend(stats.cosine.row(i).iter().map(|x| x.to_string()));
        r
    });
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    emit(a.out.as_deref(), &table_csv(&header, records)?)
}
