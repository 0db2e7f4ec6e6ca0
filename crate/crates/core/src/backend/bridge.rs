//! Subprocess backend that drives an external `slam-bridge` executable.
//!
//! Every call writes its inputs to a scratch directory, runs one bridge
//! subcommand, and reads the outputs back. The contract:
//!
//! ```text
//! slam-bridge info       --model M --out info.json
//! slam-bridge tokenize   --model M --text-file in.txt --out tokens.json
//! slam-bridge detokenize --model M --tokens tokens.json --out text.txt
//! slam-bridge extract    --model M --tokens tokens.json --layers 0,1,.. [--plan plan.json]
//!                        --out trace.slamtrace --logits-out logits.f32
//! slam-bridge generate   --model M --tokens tokens.json [--plan plan.json] --temperature T
//!                        --top-p P --max-new-tokens N --seed HEX --out gen.json
//! ```
//!
//! `extract` writes `<out>.checksums.json` next to the trace; the loaded trace
//! must match it within 1e-4 per layer. Non-zero exit status is a backend
//! error carrying the bridge's stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{Backend, ForwardOutput, PlanSchedule, SamplingParams, SteeringPlan};
use crate::bank::{b64_to_f32s, f32s_to_b64, load_trace, trace_checksums, TraceChecksum};
use crate::error::{Error, Result};

pub const PLAN_SCHEMA: &str = "slam.plan";
const CHECKSUM_SCHEMA: &str = "slam.trace-checksums";
const WIRE_VERSION: u32 = 1;
const CHECKSUM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeInfo {
    pub model_id: String,
    pub d_model: usize,
    pub layers: Vec<usize>,
    pub vocab_size: usize,
    #[serde(default)]
    pub sentence_end_tokens: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokensWire {
    tokens: Vec<u32>,
    #[serde(default)]
    prompt_len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanEntryWire {
    alpha: f64,
    apply_from_token: usize,
    per_layer: BTreeMap<usize, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanWire {
    schema: String,
    version: u32,
    d_model: usize,
    sentence_level: bool,
    plans: Vec<PlanEntryWire>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChecksumWire {
    schema: String,
    version: u32,
    layers: Vec<TraceChecksum>,
}

/// Plan file: per-layer vectors as base64 little-endian float32.
pub fn plan_to_json(schedule: &PlanSchedule, d_model: usize) -> String {
    let wire = PlanWire {
        schema: PLAN_SCHEMA.into(),
        version: WIRE_VERSION,
        d_model,
        sentence_level: schedule.sentence_level,
        plans: schedule
            .plans
            .iter()
            .map(|p| PlanEntryWire {
                alpha: p.alpha,
                apply_from_token: p.apply_from_token,
                per_layer: p
                    .per_layer
                    .iter()
                    .map(|(l, v)| {
                        let f: Vec<f32> = v.iter().map(|&x| x as f32).collect();
                        (*l, f32s_to_b64(&f))
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&wire).expect("plan serializes");
    s.push('\n');
    s
}

pub fn plan_from_json(text: &str) -> Result<(PlanSchedule, usize)> {
    let wire: PlanWire = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: 0,
        message: format!("plan file: {e}"),
    })?;
    if wire.schema != PLAN_SCHEMA {
        return Err(Error::Parse {
            offset: 0,
            message: format!("expected schema {PLAN_SCHEMA}, found {}", wire.schema),
        });
    }
    if wire.version != WIRE_VERSION {
        return Err(Error::Version {
            found: wire.version,
            expected: WIRE_VERSION,
        });
    }
    let plans = wire
        .plans
        .into_iter()
        .map(|p| {
            let per_layer = p
                .per_layer
                .into_iter()
                .map(|(l, b)| {
                    let v: Vec<f64> = b64_to_f32s(&b)?.into_iter().map(f64::from).collect();
                    Ok((l, v))
                })
                .collect::<Result<_>>()?;
            Ok(SteeringPlan {
                per_layer,
                alpha: p.alpha,
                apply_from_token: p.apply_from_token,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let schedule = if wire.sentence_level {
        PlanSchedule::sentences(plans)?
    } else {
        match <[SteeringPlan; 1]>::try_from(plans) {
            Ok([p]) => PlanSchedule::document(p),
            Err(_) => {
                return Err(Error::InvalidInput(
                    "document-level plan file must hold exactly one plan".into(),
                ))
            }
        }
    };
    schedule.validate(wire.d_model, &schedule_layers(&schedule))?;
    Ok((schedule, wire.d_model))
}

fn schedule_layers(s: &PlanSchedule) -> Vec<usize> {
    s.plans
        .iter()
        .flat_map(|p| p.per_layer.keys().copied())
        .collect()
}

/// Reads a trace's checksum sidecar.
pub fn read_checksums(path: impl AsRef<Path>) -> Result<Vec<TraceChecksum>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let wire: ChecksumWire = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    if wire.schema != CHECKSUM_SCHEMA {
        return Err(Error::Parse {
            offset: 0,
            message: format!("expected schema {CHECKSUM_SCHEMA}, found {}", wire.schema),
        });
    }
    if wire.version != WIRE_VERSION {
        return Err(Error::Version {
            found: wire.version,
            expected: WIRE_VERSION,
        });
    }
    Ok(wire.layers)
}

pub fn write_checksums(path: impl AsRef<Path>, sums: &[TraceChecksum]) -> Result<()> {
    let path = path.as_ref();
    let wire = ChecksumWire {
        schema: CHECKSUM_SCHEMA.into(),
        version: WIRE_VERSION,
        layers: sums.to_vec(),
    };
    let mut s = serde_json::to_string_pretty(&wire).expect("checksums serialize");
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Backend that shells out to a `slam-bridge` executable per call.
#[derive(Debug)]
pub struct BridgeBackend {
    program: PathBuf,
    model: String,
    info: BridgeInfo,
    calls: AtomicU64,
    scratch: AtomicU64,
}

impl BridgeBackend {
    pub fn new(program: impl Into<PathBuf>, model: impl Into<String>) -> Result<Self> {
        let mut b = Self {
            program: program.into(),
            model: model.into(),
            info: BridgeInfo {
                model_id: String::new(),
                d_model: 0,
                layers: Vec::new(),
                vocab_size: 0,
                sentence_end_tokens: Vec::new(),
            },
            calls: AtomicU64::new(0),
            scratch: AtomicU64::new(0),
        };
        let dir = b.scratch_dir()?;
        let out = dir.path().join("info.json");
        b.run(&["info", "--out", &out.to_string_lossy()])?;
        let text = std::fs::read_to_string(&out).map_err(|e| Error::io(&out, e))?;
        b.info = serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: 0,
            message: format!("bridge info: {e}"),
        })?;
        Ok(b)
    }

    pub fn info(&self) -> &BridgeInfo {
        &self.info
    }

    fn scratch_dir(&self) -> Result<tempfile::TempDir> {
        let n = self.scratch.fetch_add(1, Ordering::Relaxed);
        tempfile::Builder::new()
            .prefix(&format!("slam-bridge-{n}-"))
            .tempdir()
            .map_err(|e| Error::io(std::env::temp_dir(), e))
    }

    fn run(&self, args: &[&str]) -> Result<()> {
        let (sub, rest) = args.split_first().expect("subcommand");
        let output = Command::new(&self.program)
            .arg(sub)
            .arg("--model")
            .arg(&self.model)
            .args(rest)
            .output()
            .map_err(|e| Error::Backend(format!("cannot run {}: {e}", self.program.display())))?;
        if !output.status.success() {
            return Err(Error::Backend(format!(
                "{} {sub} failed ({}): {}",
                self.program.display(),
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        Ok(())
    }

    fn write_tokens(path: &Path, tokens: &[u32], prompt_len: usize) -> Result<()> {
        let s = serde_json::to_string(&TokensWire {
            tokens: tokens.to_vec(),
            prompt_len,
        })
        .expect("tokens serialize");
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    fn read_tokens(path: &Path) -> Result<Vec<u32>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let w: TokensWire = serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Ok(w.tokens)
    }

    fn write_plan(&self, dir: &Path, plan: Option<&PlanSchedule>) -> Result<Option<PathBuf>> {
        match plan {
            None => Ok(None),
            Some(s) => {
                s.validate(self.info.d_model, &self.info.layers)?;
                let p = dir.join("plan.json");
                std::fs::write(&p, plan_to_json(s, self.info.d_model))
                    .map_err(|e| Error::io(&p, e))?;
                Ok(Some(p))
            }
        }
    }
}

impl Backend for BridgeBackend {
    fn model_id(&self) -> &str {
        &self.info.model_id
    }

    fn layers(&self) -> Vec<usize> {
        self.info.layers.clone()
    }

    fn d_model(&self) -> usize {
        self.info.d_model
    }

    fn vocab_size(&self) -> usize {
        self.info.vocab_size
    }

    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let dir = self.scratch_dir()?;
        let input = dir.path().join("in.txt");
        let out = dir.path().join("tokens.json");
        std::fs::write(&input, text).map_err(|e| Error::io(&input, e))?;
        self.run(&[
            "tokenize",
            "--text-file",
            &input.to_string_lossy(),
            "--out",
            &out.to_string_lossy(),
        ])?;
        Self::read_tokens(&out)
    }

    fn decode(&self, tokens: &[u32]) -> Result<String> {
        let dir = self.scratch_dir()?;
        let input = dir.path().join("tokens.json");
        let out = dir.path().join("text.txt");
        Self::write_tokens(&input, tokens, 0)?;
        self.run(&[
            "detokenize",
            "--tokens",
            &input.to_string_lossy(),
            "--out",
            &out.to_string_lossy(),
        ])?;
        std::fs::read_to_string(&out).map_err(|e| Error::io(&out, e))
    }

    fn ends_sentence(&self, token: u32) -> bool {
        self.info.sentence_end_tokens.contains(&token)
    }

    fn forward(
        &self,
        tokens: &[u32],
        prompt_len: usize,
        plan: Option<&PlanSchedule>,
    ) -> Result<ForwardOutput> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if tokens.is_empty() {
            return Err(Error::InvalidInput("token sequence must not be empty".into()));
        }
        let dir = self.scratch_dir()?;
        let tok = dir.path().join("tokens.json");
        let trace_path = dir.path().join("trace.slamtrace");
        let logits_path = dir.path().join("logits.f32");
        Self::write_tokens(&tok, tokens, prompt_len)?;
        let layers = self
            .info
            .layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let plan_path = self.write_plan(dir.path(), plan)?;
        let tok_s = tok.to_string_lossy().into_owned();
        let trace_s = trace_path.to_string_lossy().into_owned();
        let logits_s = logits_path.to_string_lossy().into_owned();
        let mut args = vec![
            "extract",
            "--tokens",
            &tok_s,
            "--layers",
            &layers,
            "--out",
            &trace_s,
            "--logits-out",
            &logits_s,
        ];
        let plan_s = plan_path.map(|p| p.to_string_lossy().into_owned());
        if let Some(p) = &plan_s {
            args.extend(["--plan", p.as_str()]);
        }
        self.run(&args)?;

        let trace = load_trace(&trace_path)?;
        if trace.tokens() != tokens || trace.prompt_len() != prompt_len {
            return Err(Error::Backend(
                "bridge trace tokens/prompt_len differ from the request".into(),
            ));
        }
        let sidecar = PathBuf::from(format!("{trace_s}.checksums.json"));
        let expected = read_checksums(&sidecar)?;
        verify_checksums(&trace_checksums(&trace), &expected)?;

        let bytes = std::fs::read(&logits_path).map_err(|e| Error::io(&logits_path, e))?;
        let vocab = self.info.vocab_size;
        if bytes.len() != tokens.len() * vocab * 4 {
            return Err(Error::Dimension(format!(
                "logits file has {} bytes, expected {} tokens x {vocab} x 4",
                bytes.len(),
                tokens.len()
            )));
        }
        let logits = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(ForwardOutput {
            logits,
            vocab,
            trace,
        })
    }

    fn forward_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn generate(
        &self,
        prompt: &[u32],
        plan: Option<&PlanSchedule>,
        params: &SamplingParams,
        seed: [u8; 32],
    ) -> Result<Vec<u32>> {
        let dir = self.scratch_dir()?;
        let tok = dir.path().join("prompt.json");
        let out = dir.path().join("gen.json");
        Self::write_tokens(&tok, prompt, prompt.len())?;
        let plan_path = self.write_plan(dir.path(), plan)?;
        let tok_s = tok.to_string_lossy().into_owned();
        let out_s = out.to_string_lossy().into_owned();
        let temp = params.temperature.to_string();
        let top_p = params.top_p.to_string();
        let max_new = params.max_new_tokens.to_string();
        let seed_hex = hex::encode(seed);
        let mut args = vec![
            "generate",
            "--tokens",
            &tok_s,
            "--temperature",
            &temp,
            "--top-p",
            &top_p,
            "--max-new-tokens",
            &max_new,
            "--seed",
            &seed_hex,
            "--out",
            &out_s,
        ];
        let plan_s = plan_path.map(|p| p.to_string_lossy().into_owned());
        if let Some(p) = &plan_s {
            args.extend(["--plan", p.as_str()]);
        }
        self.run(&args)?;
        Self::read_tokens(&out)
    }
}

/// Per-layer agreement within 1e-4 on both mean and std.
pub fn verify_checksums(got: &[TraceChecksum], expected: &[TraceChecksum]) -> Result<()> {
    for e in expected {
        let g = got.iter().find(|g| g.layer == e.layer).ok_or_else(|| {
            Error::Backend(format!("trace is missing checksummed layer {}", e.layer))
        })?;
        if (g.mean - e.mean).abs() > CHECKSUM_TOL || (g.std - e.std).abs() > CHECKSUM_TOL {
            return Err(Error::Backend(format!(
                "layer {} checksum mismatch: trace mean/std {}/{} vs sidecar {}/{}",
                e.layer, g.mean, g.std, e.mean, e.std
            )));
        }
    }
    Ok(())
}
