//! Stage wiring shared by the command line and library callers: train the
//! network on the train side of a split exactly as `herdid train` does.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::embednet::{init_network, NetworkParams, NetworkSpec};
use crate::error::{Error, Result};
use crate::model::{IdentityId, Sample, SplitManifest};
use crate::trainer::{carve_validation, fit_with, EvalRecord, FitOutcome};

/// The configured network, with `class_count = 0` resolved to cover every
/// identity in `identities`.
pub fn network_spec(config: &Config, identities: impl IntoIterator<Item = IdentityId>) -> Result<NetworkSpec> {
    let mut spec = config.network.clone();
    let max_identity = identities.into_iter().max().unwrap_or(0) as usize;
    if spec.class_count == 0 {
        spec.class_count = max_identity + 1;
    } else if spec.class_count <= max_identity {
        return Err(Error::InvalidParam(format!(
            "network.class_count = {} does not cover identity {max_identity}",
            spec.class_count
        )));
    }
    Ok(spec)
}

/// Samples named by `manifest.train_ids`, in dataset order.
pub fn train_side(manifest: &SplitManifest, samples: &[Sample]) -> Result<Vec<Sample>> {
    let wanted: HashSet<&str> = manifest.train_ids.iter().map(|r| r.id.as_str()).collect();
    let picked: Vec<Sample> = samples.iter().filter(|s| wanted.contains(s.id.as_str())).cloned().collect();
    if picked.len() != wanted.len() {
        return Err(Error::Invariant(format!(
            "manifest names {} train samples, dataset provides {}",
            wanted.len(),
            picked.len()
        )));
    }
    Ok(picked)
}

/// Carves the validation set from the train side, initializes the network
/// from the run seed and fits it. `samples` sizes the classifier, so pass
/// the whole dataset.
pub fn train_on_split<F>(config: &Config, manifest: &SplitManifest, samples: &[Sample], on_improve: F) -> Result<FitOutcome>
where
    F: FnMut(&NetworkParams, &EvalRecord) -> Result<()>,
{
    let spec = network_spec(config, samples.iter().map(|s| s.identity))?;
    let train = train_side(manifest, samples)?;
    let (train, validation) = carve_validation(&train, config.train.validation_fraction, config.seed);
    log::info!("training on {} samples, validating on {}", train.len(), validation.len());
    let initial = init_network(&spec, &mut ChaCha8Rng::seed_from_u64(spec.init_seed))?;
    fit_with(initial, &train, &validation, &config.train, on_improve)
}
