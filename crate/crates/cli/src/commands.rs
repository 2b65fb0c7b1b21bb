use std::path::{Path, PathBuf};

use fqe_core::approx::{Approximator, Family, FeatureMap};
use fqe_core::bootstrap::{bootstrap_distribution, confidence_interval, Multiplier, WeightScheme};
use fqe_core::experiments::{
    canonical_a, canonical_b, study_coverage, study_cramer_rao, study_normality, Instance, StudyConfig, StudyResult,
};
use fqe_core::fqe::{run_fqe, FqeConfig, FqeEstimate};
use fqe_core::inference::{
    bound_positivity, bound_reward_free, bound_variance_aware, check_positivity, cross_covariance, empirical_c2,
    estimate_components, restricted_chi2, BoundReport, NuMode, VarianceComponents,
};
use fqe_core::io::{
    dataset_from_str, dataset_to_string, estimate_from_str, estimate_to_string, flat_record, mdp_from_str,
    policy_from_str, provenance_to_string, read_to_string, values_to_string, write_string,
};
use fqe_core::mdp::{generate_dataset, Dataset, Policy, TabularMdp};
use fqe_core::{Error, Result};

use crate::{
    BootstrapArgs, BoundsArgs, FamilyArg, FqeArgs, GenDataArgs, Inputs, ModelArgs, SchemeArg, SchemeArgs, StudyArgs,
    VarianceArgs,
};

type Fields = Vec<(String, String)>;

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn base_provenance(command: &str) -> Fields {
    vec![kv("tool", "fqe-infer"), kv("version", env!("CARGO_PKG_VERSION")), kv("command", command)]
}

fn path_field(k: &str, p: &Path) -> (String, String) {
    kv(k, p.display())
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_string(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_mdp(path: &Path) -> Result<(TabularMdp<f64>, Option<FeatureMap<f64>>)> {
    mdp_from_str(&read_to_string(path)?)
}

fn load_policy(path: &Path) -> Result<Policy<f64>> {
    policy_from_str(&read_to_string(path)?)
}

struct Loaded {
    mdp: TabularMdp<f64>,
    target: Policy<f64>,
    data: Dataset<f64>,
    fmap: FeatureMap<f64>,
    approx: Approximator,
}

fn family(model: &ModelArgs) -> Family {
    match model.family {
        FamilyArg::Tabular => Family::Tabular,
        FamilyArg::Linear => Family::Linear,
        FamilyArg::SmoothNet => Family::SmoothNet { width: model.width },
    }
}

fn feature_map(mdp: &TabularMdp<f64>, file: Option<FeatureMap<f64>>, model: &ModelArgs) -> Result<FeatureMap<f64>> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    match (model.family, model.feature_dim, file) {
        (FamilyArg::Tabular, _, _) => Ok(FeatureMap::one_hot(ns, na)),
        (_, Some(d), _) => FeatureMap::random_linear(ns, na, d, model.feature_seed),
        (_, None, Some(f)) => Ok(f),
        (_, None, None) => Ok(FeatureMap::one_hot(ns, na)),
    }
}

fn model_provenance(model: &ModelArgs, fmap: &FeatureMap<f64>) -> Fields {
    vec![
        kv("family", family(model).tag()),
        kv("width", model.width),
        kv("lambda", model.lambda),
        kv("feature_dim", fmap.dim()),
        kv("feature_seed", model.feature_seed),
    ]
}

fn load(inputs: &Inputs, model: &ModelArgs) -> Result<Loaded> {
    let (mdp, file_features) = load_mdp(&inputs.mdp)?;
    let target = load_policy(&inputs.target)?;
    let data = dataset_from_str(&read_to_string(&inputs.data)?)?;
    data.validate_against(&mdp)?;
    let fmap = feature_map(&mdp, file_features, model)?;
    let approx = Approximator::for_features(family(model), &fmap)?;
    Ok(Loaded { mdp, target, data, fmap, approx })
}

fn input_provenance(command: &str, inputs: &Inputs, model: &ModelArgs, l: &Loaded) -> Fields {
    let mut p = base_provenance(command);
    p.push(path_field("mdp", &inputs.mdp));
    p.push(path_field("target", &inputs.target));
    p.push(path_field("data", &inputs.data));
    p.push(kv("K", l.data.n_episodes()));
    p.push(kv("H", l.data.horizon()));
    p.push(kv("data_seed", l.data.seed()));
    p.extend(model_provenance(model, &l.fmap));
    p
}

fn fqe_config(model: &ModelArgs) -> FqeConfig {
    FqeConfig::with_lambda(model.lambda)
}

fn fit(l: &Loaded, model: &ModelArgs) -> Result<FqeEstimate<f64>> {
    run_fqe(&l.data, &l.target, l.mdp.initial_dist(), &l.approx, &l.fmap, &fqe_config(model), None)
}

fn toml_comment_header(fields: &Fields) -> String {
    fields.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let (mdp, _) = load_mdp(&a.mdp)?;
    let behavior = load_policy(&a.behavior)?;
    let data = generate_dataset(&mdp, &behavior, a.episodes, a.seed)?;
    let mut p = base_provenance("gen-data");
    p.push(path_field("mdp", &a.mdp));
    p.push(path_field("behavior", &a.behavior));
    write_string(&a.out, &dataset_to_string(&data, &p))
}

pub fn fqe(a: &FqeArgs) -> Result<()> {
    let l = load(&a.inputs, &a.model)?;
    let est = fit(&l, &a.model)?;
    if !est.converged() {
        eprintln!("fqe-infer: warning: at least one stage did not reach the gradient tolerance");
    }
    if let Some(out) = &a.out {
        let header = toml_comment_header(&input_provenance("fqe", &a.inputs, &a.model, &l));
        write_string(out, &format!("{header}{}", estimate_to_string(&est)?))?;
    }
    println!("v_hat={}", est.value);
    Ok(())
}

struct Analysis {
    l: Loaded,
    est: FqeEstimate<f64>,
    comps: VarianceComponents<f64>,
    provenance: Fields,
}

fn analyse(a: &VarianceArgs, command: &str) -> Result<Analysis> {
    let l = load(&a.inputs, &a.model)?;
    let est: FqeEstimate<f64> = estimate_from_str(&read_to_string(&a.estimate)?)?;
    if est.family != l.approx.family {
        return Err(Error::Config(format!(
            "estimate was fitted with family {}, but --family is {}",
            est.family.tag(),
            l.approx.family.tag()
        )));
    }
    let mode = match a.nu_rollouts {
        None => NuMode::ExactMdp(&l.mdp),
        Some(episodes) => NuMode::Rollout { mdp: &l.mdp, episodes, seed: a.seed },
    };
    let comps = estimate_components(&l.data, &l.approx, &l.fmap, &l.target, &est.thetas, mode)?;
    let mut provenance = input_provenance(command, &a.inputs, &a.model, &l);
    provenance.push(path_field("estimate", &a.estimate));
    provenance.push(kv("nu_mode", a.nu_rollouts.map_or("exact_mdp".to_string(), |m| format!("rollout({m})"))));
    provenance.push(kv("seed", a.seed));
    Ok(Analysis { l, est, comps, provenance })
}

pub fn variance(a: &VarianceArgs) -> Result<()> {
    let an = analyse(a, "variance")?;
    let div = restricted_chi2(&an.comps)?;
    let c2 = empirical_c2(&an.l.data, &an.comps, &an.l.approx, &an.l.fmap, &an.est.thetas)?;
    let k = an.l.data.n_episodes() as f64;
    let mut fields = vec![
        kv("v_hat", an.est.value),
        kv("sigma2", an.comps.sigma2),
        kv("std_error", (an.comps.sigma2 / k).sqrt()),
        kv("tilde_chi2", div.tilde_chi2),
        kv("bracket", div.bracket()),
        kv("b0", div.b0),
        kv("c2_hat", c2),
    ];
    for (h, s) in div.per_h.iter().enumerate() {
        fields.push(kv(&format!("chi2_h{h}"), s.chi2));
    }
    for (h, j) in an.comps.jitter.iter().enumerate() {
        fields.push(kv(&format!("jitter_h{h}"), j));
    }
    emit(a.out.as_ref(), &flat_record(&an.provenance, &fields))
}

fn bound_fields(fields: &mut Fields, r: &BoundReport) {
    let tag = r.kind.tag();
    fields.push(kv(&format!("{tag}_leading"), r.leading_term));
    fields.push(kv(&format!("{tag}_secondary"), r.secondary_term));
}

pub fn bounds(a: &BoundsArgs) -> Result<()> {
    let an = analyse(&a.variance, "bounds")?;
    let (l, thetas) = (&an.l, &an.est.thetas);
    let div = restricted_chi2(&an.comps)?;
    let c2 = empirical_c2(&l.data, &an.comps, &l.approx, &l.fmap, thetas)?;
    let k = l.data.n_episodes();
    let horizon = l.data.horizon();
    let d = l.approx.dim();
    let va = bound_variance_aware(an.comps.sigma2, c2, &an.comps, k, a.delta)?;
    let rf = bound_reward_free(&div, c2, k, horizon, d, a.delta)?;
    let pos = check_positivity(&l.data, &an.comps, &l.approx, &l.fmap, thetas, a.positivity_pairs, a.variance.seed)?;
    let mut fields = vec![kv("v_hat", an.est.value), kv("delta", a.delta), kv("c2_hat", c2)];
    bound_fields(&mut fields, &va);
    bound_fields(&mut fields, &rf);
    fields.push(kv("positivity_holds", pos.holds));
    fields.push(kv("positivity_min", pos.min_value));
    if pos.holds {
        let mut norms = vec![vec![0.0; horizon]; horizon];
        for (h1, row) in norms.iter_mut().enumerate() {
            for (h2, x) in row.iter_mut().enumerate() {
                *x = cross_covariance(&l.data, &l.approx, &l.fmap, thetas, &an.comps, h1, h2)?.sigma_norm;
            }
        }
        bound_fields(&mut fields, &bound_positivity(&div, &norms, c2, k, d, a.delta)?);
    }
    fields.push(kv("note", va.omitted_constant_note.replace(',', ";")));
    let mut provenance = an.provenance;
    provenance.push(kv("positivity_pairs", a.positivity_pairs));
    emit(a.variance.out.as_ref(), &flat_record(&provenance, &fields))
}

fn scheme(s: &SchemeArgs) -> WeightScheme {
    match s.scheme {
        SchemeArg::Vanilla => WeightScheme::Vanilla,
        SchemeArg::Exponential => WeightScheme::Multiplier(Multiplier::Exponential { rate: s.rate }),
        SchemeArg::Gamma => WeightScheme::Multiplier(Multiplier::Gamma { shape: s.shape, scale: s.scale }),
        SchemeArg::Uniform => WeightScheme::Multiplier(Multiplier::Uniform { a: s.lower, b: s.upper }),
    }
}

pub fn bootstrap_ci(a: &BootstrapArgs) -> Result<()> {
    let l = load(&a.inputs, &a.model)?;
    let scheme = scheme(&a.scheme);
    let cfg = fqe_config(&a.model);
    let res = bootstrap_distribution(
        &l.data,
        &l.target,
        l.mdp.initial_dist(),
        &l.approx,
        &l.fmap,
        &cfg,
        &scheme,
        a.bootstrap_reps,
        a.seed,
    )?;
    let ci = confidence_interval(&res, a.delta, res.k0)?;
    let mut p = input_provenance("bootstrap-ci", &a.inputs, &a.model, &l);
    p.push(kv("scheme", scheme.tag()));
    p.push(kv("bootstrap_reps", a.bootstrap_reps));
    p.push(kv("seed", a.seed));
    let fields = vec![
        kv("v_hat", res.base_value),
        kv("delta", a.delta),
        kv("k0", res.k0),
        kv("ci_lo", ci.lo),
        kv("ci_hi", ci.hi),
        kv("excluded", res.excluded),
    ];
    emit(a.out.as_ref(), &flat_record(&p, &fields))?;
    if let Some(path) = &a.replicates_out {
        write_string(path, &format!("{}{}", toml_comment_header(&p), values_to_string(&res.replicate_values)))?;
    }
    Ok(())
}

#[derive(Clone, Copy)]
pub enum Study {
    Normality,
    Coverage,
    CramerRao,
}

fn study_instance(a: &StudyArgs) -> Result<(Instance<f64>, Option<FeatureMap<f64>>)> {
    match (&a.instance, &a.mdp, &a.behavior, &a.target) {
        (Some(name), _, _, _) => match name.as_str() {
            "canonical-a" => Ok((canonical_a(), None)),
            "canonical-b" => Ok((canonical_b(), None)),
            other => Err(Error::Config(format!("unknown instance {other:?}; expected canonical-a or canonical-b"))),
        },
        (None, Some(mdp), Some(behavior), Some(target)) => {
            let (m, features) = load_mdp(mdp)?;
            let name = mdp.display().to_string();
            Ok((Instance { name, mdp: m, behavior: load_policy(behavior)?, target: load_policy(target)? }, features))
        }
        _ => Err(Error::Config("give --instance or all of --mdp, --behavior and --target".into())),
    }
}

fn results_table(res: &StudyResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &res.rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    let body = String::from_utf8(body).map_err(|e| Error::Format(e.to_string()))?;
    let mut header = vec![kv("schema", fqe_core::io::SCHEMA_VERSION)];
    header.extend(res.provenance.iter().cloned());
    Ok(format!("{}{body}", toml_comment_header(&header)))
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".provenance.toml");
    out.with_file_name(name)
}

pub fn study(a: &StudyArgs, which: Study) -> Result<()> {
    let (instance, file_features) = study_instance(a)?;
    let fmap = feature_map(&instance.mdp, file_features, &a.model)?;
    let mut cfg = StudyConfig::new(instance, family(&a.model), a.episodes.clone(), a.replications, a.seed)?;
    cfg.fmap = fmap;
    cfg.fqe = fqe_config(&a.model);
    cfg.bootstrap_reps = a.bootstrap_reps;
    cfg.deltas = a.delta.clone();
    cfg.schemes = vec![scheme(&a.scheme)];
    cfg.nu_rollouts = a.nu_rollouts;
    let res = match which {
        Study::Normality => study_normality(&cfg)?,
        Study::Coverage => study_coverage(&cfg)?,
        Study::CramerRao => study_cramer_rao(&cfg)?,
    };
    let mut provenance = base_provenance(res.kind.tag());
    provenance.extend(res.provenance.iter().cloned());
    provenance.push(kv("runtime_secs", res.runtime_secs.iter().map(|t| format!("{t:.3}")).collect::<Vec<_>>().join(";")));
    write_string(&a.out, &results_table(&res)?)?;
    write_string(&sidecar_path(&a.out), &provenance_to_string(&provenance)?)
}
