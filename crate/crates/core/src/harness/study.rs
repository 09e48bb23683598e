//! Toy-scale versions of the three adaptation studies.
//!
//! Study 1 pretrains on a source language and adapts to target languages
//! whose frames use unseen prototypes. Study 2 compares single-language and
//! two-language pretraining at a matched utterance budget before adapting to
//! a related third language. Study 3 repeats Study 1 with the
//! self-supervised losses switched on.

use std::fmt::Write as _;

use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::HarnessConfig;
use super::train::{median, train};
use super::wer::evaluate_wer;
use crate::corpus::{canonical_order, gen_language, grapheme_coverage, Corpus, LanguageSpec, WORLD_SEED};
use crate::error::{Error, Result};
use crate::model::{build_hooks, init_backbone, ModelConfig};
use crate::params::ParamStore;
use crate::peft::{apply_freezing_scheme, count_params, AdaptationScheme, SchemeId};
use crate::ssl::has_ssl;
use crate::tensor::counter_rng::mix;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub scheme: SchemeId,
    /// Pretraining data the backbone saw.
    pub pretrain: String,
    /// One macro-averaged WER per seed.
    pub wers: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub stdev: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub backbone_params: usize,
    /// Graphemes covered by the pretraining corpus.
    pub coverage: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub study: u8,
    pub title: String,
    pub rows: Vec<ReportRow>,
    /// Named grapheme coverage figures, out of 80.
    pub coverage: Vec<(String, usize)>,
    /// Pretraining WER on held-out source data, per pretrained backbone.
    pub pretrain_wer: Vec<(String, f64)>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn row(&self, scheme: SchemeId, pretrain: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.scheme == scheme && r.pretrain == pretrain)
    }

    pub fn coverage_of(&self, name: &str) -> Option<usize> {
        self.coverage.iter().find(|(n, _)| n == name).map(|&(_, c)| c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Study {}: {}", self.study, self.title);
        let _ = writeln!(
            s,
            "{:<6} {:<9} {:>8} {:>8} {:>8} {:>10} {:>10} {:>8} {:>9}",
            "scheme", "pretrain", "WER med", "WER mean", "stdev", "trainable", "total", "train %", "coverage"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<6} {:<9} {:>8.2} {:>8.2} {:>8.2} {:>10} {:>10} {:>8.2} {:>9}",
                r.scheme.as_str(),
                r.pretrain,
                100.0 * r.median,
                100.0 * r.mean,
                100.0 * r.stdev,
                r.trainable_params,
                r.total_params,
                100.0 * r.trainable_params as f64 / r.backbone_params.max(1) as f64,
                r.coverage
            );
        }
        for (name, c) in &self.coverage {
            let _ = writeln!(s, "covered graphemes ({name}): {c} / 80");
        }
        for (name, w) in &self.pretrain_wer {
            let _ = writeln!(s, "pretrained backbone ({name}) held-out WER: {:.2}", 100.0 * w);
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "study,scheme,pretrain,wer_median,wer_mean,wer_stdev,trainable_params,total_params,backbone_params,coverage,wer_per_seed\n",
        );
        for r in &self.rows {
            let seeds: Vec<String> = r.wers.iter().map(|w| format!("{w:.6}")).collect();
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{},{},{},{},{}",
                self.study,
                r.scheme.as_str(),
                r.pretrain,
                r.median,
                r.mean,
                r.stdev,
                r.trainable_params,
                r.total_params,
                r.backbone_params,
                r.coverage,
                seeds.join(";")
            );
        }
        s
    }
}

/// Sample standard deviation; zero for a single value.
pub fn stdev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn base_spec(cfg: &HarnessConfig) -> LanguageSpec {
    LanguageSpec {
        sigma: cfg.corpus.sigma,
        len_range: cfg.corpus.len_range,
        subset_size: cfg.corpus.subset_size,
        ..LanguageSpec::default()
    }
}

/// Source language of Studies 1 and 3.
pub fn source_language(cfg: &HarnessConfig) -> LanguageSpec {
    LanguageSpec {
        id: 0,
        seed: mix(&[cfg.seed, 1]),
        ..base_spec(cfg)
    }
}

/// Target language `i` of Studies 1 and 3.
pub fn target_language(cfg: &HarnessConfig, i: usize) -> LanguageSpec {
    LanguageSpec {
        id: 1 + i as u32,
        seed: mix(&[cfg.seed, 100 + i as u64]),
        overlap: cfg.corpus.target_overlap,
        proto_overlap: cfg.corpus.target_proto_overlap,
        ..base_spec(cfg)
    }
}

/// Study-2 languages: A (29 graphemes), B (30, sharing 8 with A) and a
/// related target C drawn across both.
pub fn study2_languages(cfg: &HarnessConfig) -> [LanguageSpec; 3] {
    let order = canonical_order(WORLD_SEED);
    let lang = |id: u32, range: std::ops::Range<usize>, proto_overlap: f64| LanguageSpec {
        id,
        seed: mix(&[cfg.seed, 200 + id as u64]),
        subset: Some(order[range].to_vec()),
        proto_overlap,
        ..base_spec(cfg)
    };
    [
        lang(10, 0..29, 1.0),
        lang(11, 21..51, 1.0),
        lang(12, 10..40, cfg.study.related_proto_overlap),
    ]
}

fn corpus(spec: &LanguageSpec, split: u64, n: usize) -> Result<Corpus> {
    gen_language(&spec.with_split(split), n, spec.len_range)
}

/// Pretrains a fresh backbone on an even mix of `langs`.
pub fn pretrain(
    cfg: &HarnessConfig,
    model: &ModelConfig,
    langs: &[LanguageSpec],
    with_ssl: bool,
) -> Result<(ParamStore<f32>, Vec<f64>, Corpus)> {
    let share = cfg.corpus.pretrain_utts / langs.len();
    let parts = langs
        .iter()
        .map(|l| corpus(l, 0, share.max(1)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Corpus> = parts.iter().collect();
    let data = Corpus::interleave(&refs, cfg.corpus.pretrain_utts);
    let (store, trace) = pretrain_corpus(cfg, model, &data, with_ssl)?;
    Ok((store, trace, data))
}

/// Pretrains a fresh backbone on `data`; the result is fully frozen.
pub fn pretrain_corpus(
    cfg: &HarnessConfig,
    model: &ModelConfig,
    data: &Corpus,
    with_ssl: bool,
) -> Result<(ParamStore<f32>, Vec<f64>)> {
    let scheme = AdaptationScheme::from_id(if with_ssl { SchemeId::J0 } else { SchemeId::F0 });
    let store = apply_freezing_scheme(&init_backbone(model, with_ssl, mix(&[cfg.seed, 7])), &scheme, model, 0)?;
    let tc = super::train::TrainConfig {
        seed: mix(&[cfg.seed, cfg.pretrain.seed, 11]),
        ..cfg.pretrain.clone()
    };
    let out = train(&tc, model, &scheme, data, store)?;
    let mut store = out.store;
    store.set_all_trainable(false);
    Ok((store, out.trace))
}

/// Adapts `base` to one target with `scheme` and returns the held-out WER.
pub fn adapt_and_score(
    cfg: &HarnessConfig,
    model: &ModelConfig,
    base: &ParamStore<f32>,
    scheme: &AdaptationScheme,
    train_set: &Corpus,
    test_set: &Corpus,
    seed: u64,
) -> Result<f64> {
    let store = apply_freezing_scheme(base, scheme, model, seed)?;
    let store = if scheme.id == SchemeId::B0 {
        store
    } else {
        let tc = super::train::TrainConfig {
            seed: mix(&[seed, cfg.adapt.seed, 13]),
            ..cfg.adapt.clone()
        };
        train(&tc, model, scheme, train_set, store)?.store
    };
    evaluate_wer(&store, model, &build_hooks(model, scheme), test_set)
}

struct Target {
    train: Corpus,
    test: Corpus,
}

fn targets(cfg: &HarnessConfig, specs: &[LanguageSpec]) -> Result<Vec<Target>> {
    specs
        .iter()
        .map(|s| {
            Ok(Target {
                train: corpus(s, 0, cfg.corpus.adapt_utts)?,
                test: corpus(s, 1, cfg.corpus.test_utts)?,
            })
        })
        .collect()
}

fn scheme_rows(
    cfg: &HarnessConfig,
    model: &ModelConfig,
    base: &ParamStore<f32>,
    schemes: &[SchemeId],
    targets: &[Target],
    pretrain: &str,
    coverage: usize,
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &id in schemes {
        let scheme = AdaptationScheme::from_id(id);
        let budget = count_params(&apply_freezing_scheme(base, &scheme, model, 0)?)?;
        let mut wers = Vec::new();
        for &seed in &cfg.study.seeds {
            let run_seed = mix(&[cfg.seed, seed, 17]);
            let mut sum = 0.0;
            for t in targets {
                sum += adapt_and_score(cfg, model, base, &scheme, &t.train, &t.test, run_seed)?;
            }
            wers.push(sum / targets.len() as f64);
        }
        log::info!("{pretrain} {id}: {:?}", wers);
        rows.push(ReportRow {
            scheme: id,
            pretrain: pretrain.to_string(),
            median: median(&wers),
            mean: wers.iter().sum::<f64>() / wers.len() as f64,
            stdev: stdev(&wers),
            wers,
            trainable_params: budget.trainable_params,
            total_params: budget.total_params,
            backbone_params: budget.backbone_params,
            coverage,
        });
    }
    Ok(rows)
}

fn seed_note(cfg: &HarnessConfig, targets: usize) -> String {
    format!(
        "{} seeds per scheme; each seed's WER is the macro-average over {} target language(s); WER in percent",
        cfg.study.seeds.len(),
        targets
    )
}

fn held_out_wer(cfg: &HarnessConfig, model: &ModelConfig, store: &ParamStore<f32>, langs: &[LanguageSpec]) -> Result<f64> {
    let b0 = AdaptationScheme::from_id(SchemeId::B0);
    let hooks = build_hooks(model, &b0);
    let mut sum = 0.0;
    for l in langs {
        sum += evaluate_wer(store, model, &hooks, &corpus(l, 1, cfg.corpus.test_utts)?)?;
    }
    Ok(sum / langs.len() as f64)
}

/// Runs study `id`. Studies 1 and 3 reuse `base` when given; study 3 needs
/// a backbone pretrained with the self-supervised losses.
pub fn run_study(id: u8, cfg: &HarnessConfig, base: Option<&Checkpoint>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let model = cfg.model_config()?;
    match id {
        1 | 3 => {
            let with_ssl = id == 3;
            let source = source_language(cfg);
            let (store, coverage) = match base {
                Some(ck) => {
                    if !ck.digest_matches(&model) {
                        log::warn!("checkpoint was written for a different model config");
                    }
                    if with_ssl && !has_ssl(&ck.store) {
                        return Err(Error::config(
                            "study 3 needs a backbone pretrained with self-supervised losses (car pretrain --ssl)",
                        ));
                    }
                    let cov = grapheme_coverage(&[&corpus(&source, 0, cfg.corpus.pretrain_utts)?])?;
                    (ck.store.clone(), cov)
                }
                None => {
                    let (s, _, data) = pretrain(cfg, &model, std::slice::from_ref(&source), with_ssl)?;
                    (s, grapheme_coverage(&[&data])?)
                }
            };
            let specs: Vec<LanguageSpec> = (0..cfg.study.target_languages).map(|i| target_language(cfg, i)).collect();
            let tg = targets(cfg, &specs)?;
            let schemes = if with_ssl { &cfg.study.study3_schemes } else { &cfg.study.study1_schemes };
            let rows = scheme_rows(cfg, &model, &store, schemes, &tg, "A", coverage)?;
            let title = if with_ssl {
                "adaptation of a backbone trained with joint supervised and self-supervised losses"
            } else {
                "monolingual adaptation from single-language pretraining"
            };
            Ok(ExperimentReport {
                study: id,
                title: title.into(),
                rows,
                coverage: vec![("A".into(), coverage)],
                pretrain_wer: vec![("A".into(), held_out_wer(cfg, &model, &store, &[source])?)],
                notes: vec![seed_note(cfg, specs.len())],
            })
        }
        2 => {
            let [a, b, c] = study2_languages(cfg);
            let tg = targets(cfg, std::slice::from_ref(&c))?;
            let mut rows = Vec::new();
            let mut coverage = Vec::new();
            let mut pretrain_wer = Vec::new();
            for (name, langs) in [("A", vec![a.clone()]), ("A+B", vec![a.clone(), b.clone()])] {
                let (store, _, data) = pretrain(cfg, &model, &langs, false)?;
                let cov = grapheme_coverage(&[&data])?;
                coverage.push((name.to_string(), cov));
                pretrain_wer.push((name.to_string(), held_out_wer(cfg, &model, &store, &langs)?));
                rows.extend(scheme_rows(cfg, &model, &store, &cfg.study.study2_schemes, &tg, name, cov)?);
            }
            let target_cov = grapheme_coverage(&[&tg[0].train])?;
            coverage.push(("target C".into(), target_cov));
            let mut notes = vec![seed_note(cfg, 1)];
            notes.push(format!(
                "pretraining budget {} utterances for both backbones",
                cfg.corpus.pretrain_utts
            ));
            Ok(ExperimentReport {
                study: 2,
                title: "adaptation to a related language from single- vs two-language pretraining".into(),
                rows,
                coverage,
                pretrain_wer,
                notes,
            })
        }
        other => Err(Error::config(format!("unknown study {other} (1, 2 or 3)"))),
    }
}
