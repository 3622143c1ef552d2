use std::path::Path;

use super::*;
use crate::defense::DefenseKind;
use crate::model::{ModelConfig, Tokenizer};

fn small(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.model.config = ModelConfig {
        vocab_size: 64,
        hidden_dim: 8,
        num_blocks: 3,
        split_point: 1,
        num_heads: 2,
        ffn_dim: 12,
        max_seq_len: 12,
        seed: 3,
    };
    cfg.model.train_steps = 20;
    cfg.corpus.prompts = 4;
    cfg.attack.iterations = 40;
    cfg.q1_sweep = vec![1, 2];
    cfg.paf.draws = 4;
    cfg.paf.max_inputs = 2;
    cfg.timing.trials = 3;
    cfg.timing.batch = 1;
    cfg.workers = 2;
    cfg
}

#[test]
fn corpus_examples() {
    let p = Path::new("c.jsonl");
    let ok = "{\"text\": \"a b\"}\n\n{\"text\": \"c\"}\n{\"text\": \"d, e?\"}\n";
    assert_eq!(parse_corpus(ok, p).unwrap(), vec!["a b", "c", "d, e?"]);
    let bad = "{\"text\": \"a\"}\n{\"text\": \n{\"text\": \"c\"}\n";
    let e = parse_corpus(bad, p).unwrap_err().to_string();
    assert!(e.contains("line 2"), "{e}");
    let e = parse_corpus("{\"text\": \"a\"}\n{\"body\": \"b\"}\n", p).unwrap_err().to_string();
    assert!(e.contains("line 2") && e.contains("text"), "{e}");
    assert!(parse_corpus("{\"text\": 5}\n", p).is_err());
    assert!(load_corpus(Path::new("/nonexistent/corpus.jsonl")).is_err());
}

#[test]
fn bundled_corpus_round_trips_through_tokenizer() {
    let lines = bundled_corpus();
    assert_eq!(lines.len(), 200);
    let tok = Tokenizer::build(&lines, 64).unwrap();
    for l in &lines {
        let ids = tok.encode(l);
        assert!(!ids.is_empty() && ids.len() <= 16);
        assert_eq!(tok.encode(&tok.decode(&ids)), ids, "{l}");
        assert!(ids.iter().all(|&i| i != crate::model::UNK_ID), "{l}");
    }
}

#[test]
fn config_layers_and_round_trip() {
    let cfg = ExperimentConfig::from_toml("seed = 7\n[corpus]\nprompts = 9\n[model]\nhidden_dim = 16\n").unwrap();
    assert_eq!((cfg.seed, cfg.corpus.prompts, cfg.model.config.hidden_dim), (7, 9, 16));
    assert_eq!(cfg.seed_source, SeedSource::File);
    assert_eq!(cfg.model.config.vocab_size, ModelConfig::default().vocab_size);
    let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert!(ExperimentConfig::from_toml("sed = 1\n").is_err());
    assert!(ExperimentConfig::from_toml("[attack]\niterations = \"many\"\n").is_err());

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.toml");
    std::fs::write(&file, "seed = 7\n[corpus]\nprompts = 9\n").unwrap();
    let ov = Overrides {
        prompts: Some(3),
        ..Overrides::default()
    };
    let r = ExperimentConfig::resolve(Some(&file), Some("11"), &ov).unwrap();
    assert_eq!((r.seed, r.seed_source, r.corpus.prompts), (11, SeedSource::Environment, 3));
    let ov = Overrides {
        seed: Some(5),
        ..Overrides::default()
    };
    let r = ExperimentConfig::resolve(Some(&file), Some("11"), &ov).unwrap();
    assert_eq!((r.seed, r.seed_source), (5, SeedSource::Flag));
    assert!(ExperimentConfig::resolve(Some(&file), Some("x"), &Overrides::default()).is_err());
    assert!(ExperimentConfig::resolve(Some(&dir.path().join("missing.toml")), None, &Overrides::default()).is_err());
    let ov = Overrides {
        corpus: Some(dir.path().join("missing.jsonl")),
        ..Overrides::default()
    };
    assert!(ExperimentConfig::resolve(None, None, &ov).is_err());
    let ov = Overrides {
        q1_sweep: vec![1, 6],
        ..Overrides::default()
    };
    assert!(ExperimentConfig::resolve(None, None, &ov).is_err());
}

#[test]
fn grid_levels_follow_ladders() {
    let cfg = ExperimentConfig::default();
    let specs = cfg.defense.grid_specs();
    assert_eq!(specs.len(), 1 + 5 * 4);
    let gauss: Vec<f64> = specs.iter().filter(|s| s.kind == DefenseKind::Gaussian).map(|s| s.variance).collect();
    assert_eq!(gauss, vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0]);
    let l0: Vec<f64> = specs.iter().filter(|s| s.kind == DefenseKind::PripertL0).map(|s| s.ratio).collect();
    assert_eq!(l0, vec![0.1, 0.3, 0.5, 0.7, 0.9]);
}

#[test]
fn floats_round_trip_through_text() {
    for x in [0.1 + 0.2, 1.0 / 3.0, 1e-300, -2.5e17, 0.0, 123456789.123456789] {
        assert_eq!(parse_float(&fmt_float(x)).unwrap().to_bits(), x.to_bits());
    }
    assert!(parse_float(&fmt_float(f64::NAN)).unwrap().is_nan());
}

#[test]
fn attack_suite_writes_consistent_files_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.defense.specs = vec!["none".into(), "element-sparsify:0.5".into(), "pripert-l0:0.5".into()];
    let lab = Lab::prepare(cfg.clone()).unwrap();
    let out = lab.run_attack_suite().unwrap();
    assert_eq!(out.rows.len(), 3 * 4);
    assert_eq!(out.summary.len(), 3);
    assert_eq!(out.errors, 0);
    let first = std::fs::read(out.results_path()).unwrap();
    let summary = std::fs::read(out.dir.join(SUMMARY_FILE)).unwrap();
    assert_eq!(read_results(&out.results_path()).unwrap().len(), 12);

    let rep = report(dir.path()).unwrap();
    assert!(rep.ok(), "{rep:?}");
    assert!(dir.path().join("attack/rouge_l.svg").is_file());
    let m = RunManifest::read(&out.dir).unwrap();
    assert!(m.files.iter().any(|f| f.path == Path::new(REPORT_FILE)));
    assert_eq!(m.samples.len(), 4);

    // Replay from the manifest's own config with a different worker count.
    let mut replay_cfg = m.config.clone();
    replay_cfg.workers = 1;
    let again = Lab::prepare(replay_cfg).unwrap().run_attack_suite().unwrap();
    assert_eq!(std::fs::read(again.results_path()).unwrap(), first);
    assert_eq!(std::fs::read(again.dir.join(SUMMARY_FILE)).unwrap(), summary);

    // Tampering is caught by the report.
    std::fs::write(out.dir.join(SUMMARY_FILE), b"defense\n").unwrap();
    assert!(!report(dir.path()).unwrap().ok());
}

#[test]
fn projection_only_split_recovers_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.model.config.split_point = 0;
    cfg.attack.iterations = 300;
    let out = Lab::prepare(cfg).unwrap().run_attack_suite().unwrap();
    let s = out.cell("none", 0.0, 0).unwrap();
    assert_eq!((s.precision.mean, s.recall.mean, s.rouge_l.mean), (100.0, 100.0, 1.0));
}

#[test]
fn per_sample_failures_become_error_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.defense.specs = vec!["none".into(), "pripert-l0:0.5".into()];
    cfg.defense.epsilon = 1.0;
    let lab = Lab::prepare(cfg).unwrap();
    let mut bad = lab.config.defense.spec("pripert-l0:0.5").unwrap();
    bad.epsilon = -1.0;
    let cells = vec![(lab.model.clone(), crate::defense::DefenseSpec::none()), (lab.model.clone(), bad)];
    let rows = lab.run_cells(&cells);
    assert_eq!(rows.len(), 8);
    assert!(rows[..4].iter().all(|r| !r.is_error()));
    assert!(rows[4..].iter().all(|r| r.is_error()));
    let s = summarize(&rows);
    assert_eq!((s[1].n, s[1].errors), (0, 4));
}

#[test]
fn grid_ablation_paf_bypass_and_timing_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.defense.grid = vec![DefenseKind::Gaussian];
    cfg.corpus.prompts = 2;
    let lab = Lab::prepare(cfg).unwrap();

    let grid = lab.run_defense_grid().unwrap();
    assert_eq!(grid.summary.len(), 6);
    let none = grid.cell("none", 0.0, 1).unwrap().utility.unwrap();
    assert_eq!((none.agreement, none.kl_divergence), (1.0, 0.0));
    assert!(grid.dir.join("frontier.csv").is_file());

    let abl = lab.run_q1_ablation().unwrap();
    let q1s: Vec<usize> = abl.summary.iter().map(|s| s.cell.q1).collect();
    assert_eq!(q1s, vec![1, 2]);

    let paf = lab.run_paf_study().unwrap();
    assert_eq!(paf.reports.len(), 10);
    assert!(paf.reports.iter().all(|r| r.max_paf >= r.mean));
    let chart = BarChart::from_svg(&std::fs::read_to_string(paf.dir.join("paf.svg")).unwrap()).unwrap();
    assert_eq!(chart.bars.len(), 10);
    assert_eq!(chart.bars[3].value, paf.reports[3].mean);

    let mut lab = lab;
    lab.config.paf.layers = vec!["block0.activation".into(), "block0.rmsnorm-2".into(), "block0.query-proj".into()];
    let by = lab.run_bypass_study().unwrap();
    assert_eq!(by.study.rows.len(), 3);

    let t = lab.run_timing().unwrap();
    assert_eq!(t.report.rows.len(), lab.config.timing.specs.len() + lab.config.timing.ratios.len());
    assert!(t.report.fit.is_some());
    assert!(t.report.rows.iter().all(|r| r.trials == 3 && r.per_1k.mean > 0.0));

    let rep = report(dir.path()).unwrap();
    assert!(rep.ok(), "{rep:?}");
}

#[test]
fn line_fit() {
    let (a, b) = fit_line(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]).unwrap();
    assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
    assert!(fit_line(&[(1.0, 1.0), (1.0, 2.0)]).is_none());
}
