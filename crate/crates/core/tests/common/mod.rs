#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use msfcn::data::{synth_phantoms, LabeledSlice, Phantom, PhantomSpec};

pub fn msfcn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msfcn"))
        .args(args)
        .current_dir(cwd)
        .env("MSFCN_THREADS", "1")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Phantoms whose heart fits inside a 36 px centre window.
pub fn small_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        size: 48,
        cavity_radius: [4.0, 6.0],
        thickness: [2.0, 4.0],
        center_jitter: 2.0,
        seed,
        ..Default::default()
    }
}

pub const SMALL_PHANTOM_TOML: &str =
    "size = 128\ncavity_radius = [4.0, 6.0]\nthickness = [2.0, 4.0]\ncenter_jitter = 2.0\n";

pub fn slice_of(p: Phantom) -> LabeledSlice {
    LabeledSlice {
        case: p.sample.id.clone(),
        endo: Some(p.endo),
        epi: Some(p.epi),
        sample: p.sample,
    }
}

pub fn phantom_slices(spec: &PhantomSpec, n: usize) -> Vec<LabeledSlice> {
    synth_phantoms(spec, n)
        .unwrap()
        .into_iter()
        .map(slice_of)
        .collect()
}
