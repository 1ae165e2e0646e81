//! Python bindings for the prototype-adaptation engine.
//!
//! The module mirrors the command-line surface: `synth`, `run`, `eval`, and
//! `gradcheck`. Structured inputs and outputs travel as JSON strings, so the
//! Python side needs nothing beyond `json.loads` and the binding layer stays
//! a thin shell around the core crate.
//!
//! Build the importable module with
//! `cargo build -p protoadapt-py --features extension-module`; the resulting
//! `libprotoadapt.so` imports as `protoadapt` once renamed/symlinked to
//! `protoadapt.so` (see `python/smoke_test.py`).

// The #[pyfunction] macro expansion performs a PyErr -> PyErr conversion
// that trips this lint; it is not in our code.
#![allow(clippy::useless_conversion)]

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use protoadapt_core::config::EngineConfig;
use protoadapt_core::datagen::{generate, SynthSpec};
use protoadapt_core::harness::{compute_metrics, run_stream, RunOptions};
use protoadapt_core::io::{
    read_json, read_manifest, read_records, write_bundle, write_json, DatasetBundle, RecordWriter,
};
use protoadapt_core::learning::{
    finite_difference_check, random_instance, FdOptions, GradientMutation,
};
use protoadapt_core::space::build_composition_space;
use protoadapt_core::{Error, Result};

fn to_py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn parse_config(config_json: Option<&str>) -> Result<EngineConfig> {
    let cfg = match config_json {
        Some(text) => serde_json::from_str::<EngineConfig>(text)
            .map_err(|e| Error::Config(format!("engine config: {e}")))?,
        None => EngineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn synth_impl(out_dir: &str, spec_json: Option<&str>) -> Result<PathBuf> {
    let spec = match spec_json {
        Some(text) => SynthSpec::from_json(text)?,
        None => SynthSpec::default(),
    };
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Runtime(format!("create {out_dir}: {e}")))?;
    write_bundle(Path::new(out_dir), &generate(&spec)?)
}

fn run_impl(
    bundle_path: &str,
    config_json: Option<&str>,
    order_seed: Option<u64>,
    out_dir: Option<&str>,
    cumulative_stride: usize,
    queue_snapshot: bool,
) -> Result<String> {
    let config = parse_config(config_json)?;
    let bundle = DatasetBundle::load(Path::new(bundle_path))?;
    let options = RunOptions {
        order_seed,
        cumulative_stride,
    };

    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::Runtime(format!("create {dir}: {e}")))?;
            Some(RecordWriter::create(&Path::new(dir).join("records.jsonl"))?)
        }
        None => None,
    };
    let summary = run_stream(&bundle, &config, &options, |rec| match writer.as_mut() {
        Some(w) => w.append(rec),
        None => Ok(()),
    })?;

    let mut doc = json!({
        "config": summary.config,
        "order_seed": summary.order_seed,
        "cumulative_stride": cumulative_stride,
        "samples": summary.records.len(),
        "warnings": summary.warnings,
        "latency": summary.latency,
        "rolled_back": summary.rolled_back,
        "metrics": summary.metrics,
    });
    if queue_snapshot {
        doc["queues"] = serde_json::to_value(&summary.queues)
            .map_err(|e| Error::Runtime(format!("serialize queue snapshot: {e}")))?;
    }
    if let Some(dir) = out_dir {
        write_json(&Path::new(dir).join("metrics.json"), &summary.metrics)?;
        // The persisted run.json matches the CLI layout: metrics live in
        // their own file, not inside the run document.
        let mut run_doc = doc.clone();
        run_doc
            .as_object_mut()
            .expect("doc is an object")
            .remove("metrics");
        write_json(&Path::new(dir).join("run.json"), &run_doc)?;
    }
    serde_json::to_string(&doc).map_err(|e| Error::Runtime(format!("serialize summary: {e}")))
}

fn eval_impl(records_path: &str, manifest_path: &str, cumulative_stride: usize) -> Result<String> {
    let manifest_path = Path::new(manifest_path);
    let manifest = read_manifest(manifest_path)?;
    let mask = match manifest
        .files
        .as_ref()
        .and_then(|f| f.feasibility_mask.as_ref())
    {
        Some(rel) => {
            let dir = manifest_path.parent().unwrap_or(Path::new("."));
            Some(read_json::<Vec<bool>>(&dir.join(rel))?)
        }
        None => None,
    };
    let space = build_composition_space(&manifest, mask.as_deref())?;
    let records = read_records(Path::new(records_path))?;
    let metrics = compute_metrics(&records, &space, cumulative_stride)?;
    serde_json::to_string(&metrics).map_err(|e| Error::Runtime(format!("serialize metrics: {e}")))
}

#[allow(clippy::too_many_arguments)]
fn gradcheck_impl(
    trials: usize,
    seed: u64,
    class_range: (usize, usize),
    dim_range: (usize, usize),
    h: f64,
    tolerance: f64,
    max_coords: usize,
    config_json: Option<&str>,
    inject_gradient_bug: bool,
) -> Result<String> {
    if trials == 0 {
        return Err(Error::Input("nothing to check: trials is 0".into()));
    }
    let switches = parse_config(config_json)?.switches;
    let mutation = if inject_gradient_bug {
        GradientMutation::ZeroTextual
    } else {
        GradientMutation::None
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut mean_sum = 0.0;
    let mut failures = 0usize;
    for i in 0..trials {
        let mut inst = random_instance(&mut rng, class_range, dim_range);
        inst.config.switches = switches;
        let opts = FdOptions {
            h,
            tolerance,
            max_coords,
            seed: seed.wrapping_add(i as u64),
        };
        let report =
            finite_difference_check(&inst.ctx(), &inst.kam, &inst.config, &opts, mutation)?;
        worst = worst.max(report.max_rel_err);
        mean_sum += report.mean_rel_err;
        if !report.passed {
            failures += 1;
        }
    }
    let doc = json!({
        "trials": trials,
        "h": h,
        "tolerance": tolerance,
        "switches": switches,
        "max_rel_err": worst,
        "mean_rel_err": mean_sum / trials as f64,
        "failures": failures,
        "passed": failures == 0,
    });
    serde_json::to_string(&doc).map_err(|e| Error::Runtime(format!("serialize report: {e}")))
}

/// Generate a synthetic dataset bundle into `out_dir`; returns the manifest
/// path. `spec_json` overrides default synthesis parameters.
#[pyfunction]
#[pyo3(signature = (out_dir, spec_json=None))]
fn synth(out_dir: &str, spec_json: Option<&str>) -> PyResult<String> {
    let path = synth_impl(out_dir, spec_json).map_err(to_py_err)?;
    Ok(path.display().to_string())
}

/// Stream a bundle through the engine once. Returns a JSON summary with the
/// effective config, warnings, latency, and the metrics document; when
/// `out_dir` is given, also persists records.jsonl / metrics.json / run.json
/// in the command-line layout.
#[pyfunction]
#[pyo3(signature = (bundle, config_json=None, order_seed=None, out_dir=None, cumulative_stride=25, queue_snapshot=false))]
fn run(
    bundle: &str,
    config_json: Option<&str>,
    order_seed: Option<u64>,
    out_dir: Option<&str>,
    cumulative_stride: usize,
    queue_snapshot: bool,
) -> PyResult<String> {
    run_impl(
        bundle,
        config_json,
        order_seed,
        out_dir,
        cumulative_stride,
        queue_snapshot,
    )
    .map_err(to_py_err)
}

/// Recompute the metrics document (as a JSON string) from a record file.
#[pyfunction]
#[pyo3(signature = (records, manifest, cumulative_stride=25))]
fn eval(records: &str, manifest: &str, cumulative_stride: usize) -> PyResult<String> {
    eval_impl(records, manifest, cumulative_stride).map_err(to_py_err)
}

/// Check analytical gradients against central finite differences on random
/// instances; returns a JSON report with a `passed` flag.
#[pyfunction]
#[pyo3(signature = (trials=100, seed=0, min_classes=2, max_classes=6, min_dims=2, max_dims=8, h=1e-5, tolerance=1e-4, max_coords=200, config_json=None, inject_gradient_bug=false))]
#[allow(clippy::too_many_arguments)]
fn gradcheck(
    trials: usize,
    seed: u64,
    min_classes: usize,
    max_classes: usize,
    min_dims: usize,
    max_dims: usize,
    h: f64,
    tolerance: f64,
    max_coords: usize,
    config_json: Option<&str>,
    inject_gradient_bug: bool,
) -> PyResult<String> {
    gradcheck_impl(
        trials,
        seed,
        (min_classes, max_classes),
        (min_dims, max_dims),
        h,
        tolerance,
        max_coords,
        config_json,
        inject_gradient_bug,
    )
    .map_err(to_py_err)
}

#[pymodule]
fn protoadapt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(eval, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn synth_run_eval_pipeline_through_impls() {
        let tmp = TempDir::new().unwrap();
        let bundle_dir = tmp.path().join("bundle");
        let manifest = synth_impl(
            bundle_dir.to_str().unwrap(),
            Some(r#"{ "attributes": 3, "objects": 3, "test_samples": 30, "dim": 16 }"#),
        )
        .unwrap();

        let out_dir = tmp.path().join("out");
        let summary_json = run_impl(
            manifest.to_str().unwrap(),
            Some(r#"{ "tau": 0.5 }"#),
            Some(11),
            Some(out_dir.to_str().unwrap()),
            25,
            true,
        )
        .unwrap();
        let summary: serde_json::Value = serde_json::from_str(&summary_json).unwrap();
        assert_eq!(summary["samples"], serde_json::json!(30));
        assert_eq!(summary["config"]["tau"], serde_json::json!(0.5));
        assert!(summary["queues"].is_array());
        let auc = summary["metrics"]["bias_curve"]["auc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&auc));

        // Inline metrics equal the re-evaluated metrics from the records.
        let eval_json = eval_impl(
            out_dir.join("records.jsonl").to_str().unwrap(),
            manifest.to_str().unwrap(),
            25,
        )
        .unwrap();
        let evaluated: serde_json::Value = serde_json::from_str(&eval_json).unwrap();
        assert_eq!(summary["metrics"], evaluated);
    }

    #[test]
    fn gradcheck_impl_passes_and_flags_injected_bug() {
        let clean: serde_json::Value = serde_json::from_str(
            &gradcheck_impl(5, 0, (2, 6), (2, 8), 1e-5, 1e-4, 200, None, false).unwrap(),
        )
        .unwrap();
        assert_eq!(clean["passed"], serde_json::json!(true));

        let buggy: serde_json::Value = serde_json::from_str(
            &gradcheck_impl(5, 0, (2, 6), (2, 8), 1e-5, 1e-4, 200, None, true).unwrap(),
        )
        .unwrap();
        assert_eq!(buggy["passed"], serde_json::json!(false));

        assert!(gradcheck_impl(0, 0, (2, 6), (2, 8), 1e-5, 1e-4, 200, None, false).is_err());
    }
}
