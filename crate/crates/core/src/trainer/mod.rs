//! Minibatch training with Adam, CSV logging and checkpointing.

mod adam;
mod checkpoint;
mod config;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::{TrainConfig, KEYS};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::objective::{batch_rows, loss_gradients, ElboBreakdown, ElboNoise};

pub const LOG_HEADER: &str = "epoch,recon,content_kl,style_kl,total,seconds";

/// Per-instance averages of the ELBO terms over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elbo: ElboBreakdown,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let e = &self.elbo;
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, e.reconstruction, e.content_kl, e.style_kl, e.total, self.seconds
        )
    }
}

/// Seed for everything random within `epoch` (1-based).
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Freshly initialized model and optimizer state for `config`.
pub fn initialize(config: &TrainConfig, dataset: &Dataset) -> Result<Checkpoint> {
    config.validate()?;
    if let Some(bad) = dataset.instances.iter().find(|i| i.label > config.k) {
        return Err(Error::Contract(format!("dataset label {} exceeds k = {}", bad.label, config.k)));
    }
    let mc = ModelConfig::new(dataset.data_dim, config.content_dim, config.style_dim, config.k, config.prior_mode);
    let model = Model::new(mc, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let adam = AdamState::new(model.named().into_iter().map(|(_, t)| t));
    Ok(Checkpoint {
        config: config.clone(),
        model,
        adam,
        epochs_done: 0,
    })
}

/// Run the next epoch in place.
pub fn run_epoch(ckpt: &mut Checkpoint, dataset: &Dataset) -> Result<EpochRecord> {
    let start = Instant::now();
    let epoch = ckpt.epochs_done + 1;
    let cfg = &ckpt.config;
    let seed = epoch_seed(cfg.seed, epoch);
    let batches = make_batches(dataset, cfg.batch_size, seed)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let (lr, k, d_c, d_s) = (cfg.learning_rate, cfg.k, cfg.content_dim, cfg.style_dim);

    let mut sum = [0.0; 4];
    for (b, batch) in batches.iter().enumerate() {
        let (x, levels) = batch_rows(dataset, batch)?;
        let noise = ElboNoise::draw(&mut noise_rng, k, d_c, levels.len(), d_s)?;
        let (elbo, grads) = loss_gradients(&ckpt.model, &x, &levels, &noise)?;
        let non_finite = elbo
            .non_finite_term()
            .or_else(|| grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())).then_some("gradient"));
        if let Some(term) = non_finite {
            return Err(Error::NonFinite {
                term,
                epoch,
                batch: b + 1,
            });
        }
        adam_step(&mut ckpt.model.tensors_mut(), &grads, &mut ckpt.adam, lr)?;
        for (s, v) in sum
            .iter_mut()
            .zip([elbo.reconstruction, elbo.content_kl, elbo.style_kl, elbo.total])
        {
            *s += v;
        }
    }
    ckpt.epochs_done = epoch;
    let n = dataset.len() as f64;
    Ok(EpochRecord {
        epoch,
        elbo: ElboBreakdown {
            reconstruction: sum[0] / n,
            content_kl: sum[1] / n,
            style_kl: sum[2] / n,
            total: sum[3] / n,
        },
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

/// Train for `config.epochs` epochs, writing the CSV log and the final
/// checkpoint to the configured paths. `on_epoch` sees every log row.
pub fn train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    let mut ckpt = initialize(config, dataset)?;
    let log_path = &config.log_path;
    create_parent(log_path)?;
    let file = fs::File::create(log_path).map_err(|e| Error::io(log_path, e))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(log_path, e))?;
    for _ in 0..config.epochs {
        let record = run_epoch(&mut ckpt, dataset)?;
        writeln!(log, "{}", record.csv_row()).map_err(|e| Error::io(log_path, e))?;
        log.flush().map_err(|e| Error::io(log_path, e))?;
        on_epoch(&record);
    }
    ckpt.save(&config.checkpoint_path)?;
    Ok(ckpt)
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<Checkpoint> {
    train_with(config, dataset, |_| {})
}
