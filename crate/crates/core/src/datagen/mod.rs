//! Synthetic phase-field data: Cahn-Hilliard spinodal decomposition runs
//! rendered to images, with 18 processing parameters as descriptors and six
//! microstructure characteristics as regression targets.

mod image;
mod manifest;
mod params;
mod sim;
mod targets;

use std::fs;
use std::path::Path;

pub use image::{read_image, render_image, write_image, IMAGE_MAGIC};
pub use manifest::{
    header as manifest_header, read_manifest, write_manifest, ColumnDoc, DatasetManifest,
    ManifestMeta, ManifestRow, MANIFEST_FILE, META_FILE,
};
pub use params::{
    sample_params, Regime, SimParams, N_ACTIVE_PARAMS, N_PARAMS, PARAM_NAMES, PARAM_RANGES,
};
pub use sim::{run_simulation, PhaseField, Simulation};
pub use targets::{extract_targets, TargetVector, N_TARGETS, TARGET_NAMES};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

pub const DEFAULT_GRID: usize = 64;

/// Number of quench-time classes used by the backbone pretext task.
pub const N_TIME_BINS: usize = 4;

/// Quench-time class of a parameter tuple: equal-width bins of the total
/// simulated time over its declared range.
pub fn time_bin(total_time: f64) -> usize {
    let (lo, hi) = PARAM_RANGES[5];
    let frac = ((total_time - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((frac * N_TIME_BINS as f64) as usize).min(N_TIME_BINS - 1)
}

/// One fully simulated sample.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub params: SimParams,
    pub field: PhaseField,
    pub targets: TargetVector,
}

/// Simulates sample `index` of a dataset. Each sample draws from its own
/// stream derived from `(seed, index)`, so samples are independent of
/// generation order.
pub fn generate_sample(index: usize, regime: Regime, n: usize, seed: u64) -> Result<GeneratedSample> {
    let mut rng = seeded(derive_seed(seed, index as u64));
    let params = sample_params(&mut rng, regime);
    let field = run_simulation(&params, n, &mut rng)?;
    let targets = extract_targets(&field, &params)?;
    Ok(GeneratedSample {
        params,
        field,
        targets,
    })
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Generates `count` samples into `output_dir`: one `DMIM` image per sample
/// under `images/` plus `manifest.csv` and `manifest.json`.
pub fn generate_dataset(
    count: usize,
    regime: Regime,
    n: usize,
    seed: u64,
    output_dir: &Path,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::EmptyDataset("generate_dataset needs count >= 1".into()));
    }
    if !n.is_power_of_two() {
        return Err(Error::GridNotPowerOfTwo(n));
    }
    let image_dir = output_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut meta = ManifestMeta::new(regime, n, seed, count);
    let mut rows = Vec::with_capacity(count);
    for index in 0..count {
        let sample = generate_sample(index, regime, n, seed)?;
        let id = sample_id(index);
        let rel = format!("images/{id}.dmim");
        write_image(&output_dir.join(&rel), &render_image(&sample.field))?;
        if sample.targets.length_undefined {
            meta.undefined_length_scale.push(id.clone());
        }
        rows.push(ManifestRow {
            sample_id: id,
            image_file: rel,
            descriptors: sample.params.to_array().to_vec(),
            targets: sample.targets.to_array().to_vec(),
        });
    }
    let manifest = DatasetManifest {
        rows,
        meta: Some(meta),
    };
    write_manifest(output_dir, &manifest)?;
    Ok(manifest)
}
