// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pace_core::codec::{AudioClip, AudioCodes, SAMPLE_RATE};
use pace_core::eval::{f0_scaled_distance as distance, F0Contour};
use pace_core::pipeline::{generate_synthetic_dataset, Checkpoint, Config, PaceState, SyntheticSpec};
use pace_core::prosody::ProsodyFeatures;
use pace_core::tensor::no_grad;
use pace_core::PaceError;

fn py_err(e: PaceError) -> PyErr {
    match e {
        PaceError::Io(_) | PaceError::State(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn clip(samples: Vec<f64>) -> AudioClip {
    AudioClip::new(samples, SAMPLE_RATE)
}

/// Pitch track of 24 kHz samples: (f0 in Hz per 40-sample frame, voicing flags).
#[pyfunction]
fn extract_f0(samples: Vec<f64>) -> PyResult<(Vec<f64>, Vec<u8>)> {
    pace_core::prosody::extract_f0(&clip(samples)).map_err(py_err)
}

/// Per-utterance f0 bins (0 on unvoiced frames).
#[pyfunction]
fn quantize_f0(raw_f0_hz: Vec<f64>, uv: Vec<u8>) -> PyResult<Vec<usize>> {
    pace_core::prosody::quantize_f0(&raw_f0_hz, &uv).map_err(py_err)
}

/// Z-scored RMS distance between two f0 contours (0 marks unvoiced frames).
#[pyfunction]
fn f0_scaled_distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let a = F0Contour::new(a).map_err(py_err)?;
    let b = F0Contour::new(b).map_err(py_err)?;
    distance(&a, &b).map_err(py_err)
}

/// Multi-scale spectral loss between two equal-length clips.
#[pyfunction]
fn spectral_distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    pace_core::losses::spectral_distance(&clip(a), &clip(b)).map_err(py_err)
}

/// Renders one harmonic clip; returns (samples, ground-truth frame f0).
#[pyfunction]
#[pyo3(signature = (contour, amplitudes, duration, noise_floor=0.0, seed=0))]
fn synthesize(
    contour: Vec<(f64, f64)>,
    amplitudes: [f64; 8],
    duration: f64,
    noise_floor: f64,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let spec = SyntheticSpec {
        f0_contour: contour,
        harmonic_amplitudes: amplitudes,
        duration,
        noise_floor,
    };
    let mut out = generate_synthetic_dataset(&[spec], seed).map_err(py_err)?;
    let c = out.remove(0);
    Ok((c.clip.into_samples(), c.f0_hz))
}

/// A trained PACE model loaded from a stage checkpoint.
#[pyclass(unsendable)]
struct Model {
    state: PaceState,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        let state = PaceState::from_checkpoint(&ckpt, &Config::desk()).map_err(py_err)?;
        Ok(Self { state })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.state.variant.name()
    }

    /// Target content and timbre with the prompt's pitch contour.
    fn convert(&self, target: Vec<f64>, prosody_prompt: Vec<f64>) -> PyResult<Vec<f64>> {
        self.state
            .prosody_swap_inference(&clip(target), &clip(prosody_prompt))
            .map(AudioClip::into_samples)
            .map_err(py_err)
    }

    /// Codes as a frames × codebooks nested list.
    fn encode(&self, samples: Vec<f64>) -> PyResult<Vec<Vec<u16>>> {
        let c = clip(samples);
        let features = ProsodyFeatures::extract(&c).map_err(py_err)?;
        let codes = no_grad(|| self.state.codec.encode_codes(&c, &features)).map_err(py_err)?;
        Ok(codes.codes)
    }

    fn decode(&self, codes: Vec<Vec<u16>>) -> PyResult<Vec<f64>> {
        let stages = codes.first().map_or(0, Vec::len);
        let codes = AudioCodes { stages, codes };
        no_grad(|| self.state.codec.decode_codes(&codes))
            .map(AudioClip::into_samples)
            .map_err(py_err)
    }
}

#[pymodule]
fn pace_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SAMPLE_RATE", SAMPLE_RATE)?;
    m.add_function(wrap_pyfunction!(extract_f0, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_f0, m)?)?;
    m.add_function(wrap_pyfunction!(f0_scaled_distance, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_distance, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
