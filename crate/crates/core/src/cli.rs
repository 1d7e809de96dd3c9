//! `qdcgan` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 verification mismatch.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::engine::{self, FifoDepth};
use crate::lowering;
use crate::netmodel::{self, NetworkSpec, OUTPUT_BITS};
use crate::oracle::{self, FuzzLimits, VerifyReport};
use crate::perfmodel;
use crate::qarith::{code_limit, QTensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_MISMATCH: i32 = 2;

pub const MNIST_LIKE_CONFIG: &str = include_str!("../configs/mnist_like.json");
pub const CELEBA_LIKE_CONFIG: &str = include_str!("../configs/celeba_like.json");

/// The two shipped generator configurations.
#[derive(Debug, Clone)]
pub struct ReferenceConfigs {
    pub mnist_like: NetworkSpec,
    pub celeba_like: NetworkSpec,
}

pub fn reference_configs() -> ReferenceConfigs {
    ReferenceConfigs {
        mnist_like: netmodel::parse_network_config(MNIST_LIKE_CONFIG).expect("shipped config is valid"),
        celeba_like: netmodel::parse_network_config(CELEBA_LIKE_CONFIG).expect("shipped config is valid"),
    }
}

#[derive(Debug, Parser)]
#[command(name = "qdcgan", version, about = "Quantized deconvolution GAN accelerator model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Show how each layer lowers to a unit-stride convolution.
    Lower {
        #[arg(long)]
        config: PathBuf,
    },
    /// Quantize and pack weights into a QWT1 file.
    Pack {
        #[arg(long)]
        config: PathBuf,
        /// Little-endian f32 weights, layers concatenated, each (out, in, kh, kw).
        #[arg(long, required_unless_present = "random_seed", conflicts_with = "random_seed")]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Generate uniform random weights instead of reading them.
        #[arg(long)]
        random_seed: Option<u64>,
    },
    /// Run the generator on seeded noise and write a PGM/PPM image.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate per-layer cycles and pipeline throughput.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        clock_mhz: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Check the streaming engine against the scatter-add reference.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        /// Also verify randomly drawn small layer geometries.
        #[arg(long)]
        fuzz_specs: bool,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => EXIT_INPUT,
            Self::Mismatch(_) => EXIT_MISMATCH,
        }
    }
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{e}");
                    EXIT_INPUT
                }
            };
        }
    };
    let result = match cli.command {
        Command::Lower { config } => cmd_lower(&config, out),
        Command::Pack {
            config,
            weights,
            out: path,
            random_seed,
        } => cmd_pack(&config, weights.as_deref(), &path, random_seed, out),
        Command::Run {
            config,
            weights,
            seed,
            out: path,
        } => cmd_run(&config, &weights, seed, &path, out),
        Command::Estimate { config, clock_mhz, json } => cmd_estimate(&config, clock_mhz, json, out),
        Command::Verify {
            config,
            trials,
            seed,
            fuzz_specs,
        } => cmd_verify(&config, trials, seed, fuzz_specs, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn load(config: &Path) -> Result<NetworkSpec, CliError> {
    netmodel::load_network_config(config).map_err(input_err)
}

fn cmd_lower(config: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = load(config)?;
    let shapes = spec.shapes();
    let mut text = format!("network: {}\n", spec.name);
    text += &format!(
        "{:>5} {:>12} {:>9} {:>10} {:>14} {:>12}\n",
        "layer", "input", "expansion", "border_pad", "expanded", "output"
    );
    for (i, l) in spec.layers().iter().enumerate() {
        let lc = lowering::lower_layer(l, shapes[i]).map_err(input_err)?;
        text += &format!(
            "{:>5} {:>12} {:>9} {:>10} {:>14} {:>12}\n",
            i,
            lc.in_shape.to_string(),
            lc.expansion,
            lc.border_pad,
            lc.expanded_shape.to_string(),
            lc.out_shape.to_string()
        );
    }
    out.write_all(text.as_bytes()).map_err(input_err)
}

/// Splits a little-endian f32 blob into per-layer weight vectors.
fn read_raw_weights(spec: &NetworkSpec, path: &Path) -> Result<Vec<Vec<f32>>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if bytes.len() % 4 != 0 {
        return Err(CliError::Input(format!(
            "{}: {} bytes is not a whole number of f32 values",
            path.display(),
            bytes.len()
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let mut rest = floats.as_slice();
    let mut layers = Vec::with_capacity(spec.layers().len());
    for (i, l) in spec.layers().iter().enumerate() {
        let need = l.out_channels * l.matrix_cols();
        if rest.len() < need {
            return Err(CliError::Input(format!(
                "layer {i}: needs {need} weights, only {} left in {}",
                rest.len(),
                path.display()
            )));
        }
        let (head, tail) = rest.split_at(need);
        layers.push(head.to_vec());
        rest = tail;
    }
    if !rest.is_empty() {
        return Err(CliError::Input(format!(
            "{} has {} weights beyond the last layer",
            path.display(),
            rest.len()
        )));
    }
    Ok(layers)
}

fn cmd_pack(
    config: &Path,
    weights: Option<&Path>,
    path: &Path,
    random_seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let spec = load(config)?;
    let raw = match (weights, random_seed) {
        (_, Some(seed)) => netmodel::random_raw_weights(&spec, seed),
        (Some(p), None) => read_raw_weights(&spec, p)?,
        (None, None) => return Err(CliError::Input("either --weights or --random-seed is required".into())),
    };
    let dense = netmodel::quantize_weights(&spec, &raw).map_err(input_err)?;
    let packed = netmodel::pack_network(&spec, &dense).map_err(input_err)?;
    netmodel::write_weight_file(&spec, &packed, path).map_err(input_err)?;
    let mut text = String::new();
    for (i, (l, p)) in spec.layers().iter().zip(&packed).enumerate() {
        let weight_bits = (l.matrix_rows() * l.matrix_cols()) as u64 * u64::from(l.weight_bits);
        let threshold_bits = l.threshold_count() as u64 * 64;
        text += &format!(
            "layer {i}: {weight_bits} weight bits, {threshold_bits} threshold bits, {} packed codes (PE={}, SIMD={})\n",
            p.codes.len(),
            l.pe,
            l.simd
        );
    }
    text += &format!(
        "total: {} bits -> {}\n",
        perfmodel::weight_memory_bits(&spec),
        path.display()
    );
    out.write_all(text.as_bytes()).map_err(input_err)
}

/// Maps an output code in `[-2^8, 2^8]` to a byte: `round((v + 1) / 2 * 255)`.
pub fn pixel_from_code(code: i32) -> u8 {
    let lim = code_limit(OUTPUT_BITS);
    let num = i64::from(code.clamp(-lim, lim) + lim) * 255;
    let den = 2 * i64::from(lim);
    ((2 * num + den) / (2 * den)) as u8
}

/// Binary PGM (1 channel) or PPM (3 channels), maxval 255.
pub fn encode_image(t: &QTensor) -> Result<Vec<u8>, String> {
    let s = t.shape();
    let magic = match s.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(format!("cannot write a {c}-channel output as PGM/PPM")),
    };
    let mut bytes = format!("{magic}\n{} {}\n255\n", s.width, s.height).into_bytes();
    bytes.extend(t.codes().iter().map(|&c| pixel_from_code(c)));
    Ok(bytes)
}

fn cmd_run(config: &Path, weights: &Path, seed: u64, path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = load(config)?;
    let packed = netmodel::load_weights_for(&spec, weights).map_err(input_err)?;
    let z = engine::generate_noise(seed, spec.input_shape, spec.input_bits()).map_err(input_err)?;
    let started = Instant::now();
    let run = engine::run_network_pipelined(&spec, &packed, &z, FifoDepth::default()).map_err(input_err)?;
    let elapsed = started.elapsed();
    let image = encode_image(&run.output).map_err(CliError::Input)?;
    fs::write(path, image).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    writeln!(
        out,
        "output shape: {}\nwall time: {:.3} ms\nwrote {}",
        run.output.shape(),
        elapsed.as_secs_f64() * 1e3,
        path.display()
    )
    .map_err(input_err)
}

fn cmd_estimate(config: &Path, clock_mhz: Option<f64>, json: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let mut spec = load(config)?;
    if let Some(mhz) = clock_mhz {
        if !(mhz.is_finite() && mhz > 0.0) {
            return Err(CliError::Input(format!("--clock-mhz must be positive, got {mhz}")));
        }
        spec.clock_mhz = mhz;
    }
    let report = perfmodel::estimate_fps(&spec, spec.clock_hz()).map_err(input_err)?;
    if json {
        let text = serde_json::to_string_pretty(&report).map_err(input_err)?;
        writeln!(out, "{text}").map_err(input_err)
    } else {
        writeln!(out, "{report}").map_err(input_err)
    }
}

fn summarize(label: &str, r: &VerifyReport) -> String {
    format!(
        "{label}: {} trials, {}; ring buffer peak {}/{} codes, {} occupancy violations, {} trip-count violations\n",
        r.trials,
        if r.mismatch.is_none() { "bit-exact" } else { "MISMATCH" },
        r.peak_occupancy,
        r.peak_occupancy_bound,
        r.occupancy_violations,
        r.trip_count_violations
    )
}

fn cmd_verify(config: &Path, trials: usize, seed: u64, fuzz: bool, out: &mut dyn Write) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::Input("--trials must be at least 1".into()));
    }
    let spec = load(config)?;
    let weights = netmodel::quantize_weights(&spec, &netmodel::random_raw_weights(&spec, seed)).map_err(input_err)?;
    let report = oracle::equivalence_check(&spec, &weights, trials, seed).map_err(input_err)?;
    let mut text = summarize(&spec.name, &report);
    let mut failures = Vec::new();
    if !report.passed() {
        failures.push(failure_detail(&spec.name, &report));
    }
    if fuzz {
        let (fr, cov) = oracle::fuzz_equivalence(trials, seed, &FuzzLimits::default()).map_err(input_err)?;
        text += &summarize("fuzzed geometries", &fr);
        text += &format!(
            "coverage: {} networks ({} multi-layer), {} layers, {} ragged PE/SIMD tilings\n  kernel {:?}\n  stride {:?}\n  pad {:?}\n",
            cov.networks, cov.multi_layer_networks, cov.layers, cov.ragged_tilings, cov.kernel, cov.stride, cov.pad
        );
        if !fr.passed() {
            failures.push(failure_detail("fuzzed geometries", &fr));
        }
    }
    out.write_all(text.as_bytes()).map_err(input_err)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Mismatch(failures.join("; ")))
    }
}

fn failure_detail(label: &str, r: &VerifyReport) -> String {
    match &r.mismatch {
        Some(m) => format!("{label}: first mismatch in {m}"),
        None => format!(
            "{label}: {} ring-buffer and {} trip-count violations",
            r.occupancy_violations, r.trip_count_violations
        ),
    }
}
