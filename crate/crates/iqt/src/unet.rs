//! The anisotropic U-Net: residual cores on every level, bottleneck blocks
//! that super-resolve skip connections along z, anisotropic (2,2,1) pooling
//! until feature maps become isotropic, and a decoder that doubles all three
//! dimensions per level. The network maps a (w, h, d) low-field patch to a
//! (w, h, k*d) high-field patch.
//!
//! Also here: the training loop (Adam, mini-batches, per-epoch validation,
//! early stopping, best-checkpoint return) and whole-volume inference by
//! patch prediction and overlap averaging.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    activation_shapes, adam_step, backward, forward, initialize_params, mse_loss, AdamConfig,
    ForwardPass, Graph, GraphBuilder, Mode, NnError, ParamStore, Tensor5,
};
use crate::patch::{assemble, covering_grid, PatchError, PatchLibrary, PatchSpec};
use crate::volume::{Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum UnetError {
    #[error("invalid network spec: {0}")]
    BadSpec(String),
    #[error("input shape {input:?} incompatible with the network (needs x,y divisible by {xy_div}, z by {z_div})")]
    BadInputShape {
        input: (usize, usize, usize),
        xy_div: usize,
        z_div: usize,
    },
    #[error("patch library is empty")]
    EmptyLibrary,
    #[error("library patch size {lib:?} does not match network output {net:?}")]
    LibraryMismatch {
        lib: (usize, usize, usize),
        net: (usize, usize, usize),
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Up-scaling factor along z; one of 2, 4, 8.
    pub k: usize,
    /// Filters on the first level, doubling per level.
    pub base_filters: usize,
    /// Total levels (encoder depth); 5 reproduces the reference wiring.
    pub levels: usize,
    /// Shrinking-layer count b of the bottleneck blocks.
    pub bb_shrink: usize,
    /// Convolution count of each residual core.
    pub rc_depth: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            k: 4,
            base_filters: 16,
            levels: 5,
            bb_shrink: 2,
            rc_depth: 3,
        }
    }
}

impl NetworkSpec {
    fn aniso_levels(&self) -> usize {
        self.k.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<(), UnetError> {
        if !matches!(self.k, 2 | 4 | 8) {
            return Err(UnetError::BadSpec(format!("k = {} not in {{2, 4, 8}}", self.k)));
        }
        if !matches!(self.bb_shrink, 2 | 3) {
            return Err(UnetError::BadSpec(format!(
                "bb_shrink = {} not in {{2, 3}}",
                self.bb_shrink
            )));
        }
        if self.rc_depth == 0 {
            return Err(UnetError::BadSpec("rc_depth must be at least 1".into()));
        }
        if self.base_filters < 2 || self.base_filters % 2 != 0 {
            return Err(UnetError::BadSpec(format!(
                "base_filters = {} must be even and at least 2",
                self.base_filters
            )));
        }
        if self.levels < self.aniso_levels() + 1 {
            return Err(UnetError::BadSpec(format!(
                "levels = {} too shallow for k = {} (needs at least {})",
                self.levels,
                self.k,
                self.aniso_levels() + 1
            )));
        }
        Ok(())
    }

    /// Required divisor of the input x and y dims.
    pub fn xy_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Required divisor of the input z dim.
    pub fn z_divisor(&self) -> usize {
        1 << (self.levels - 1 - self.aniso_levels())
    }

    pub fn check_input(&self, dims: (usize, usize, usize)) -> Result<(), UnetError> {
        let (w, h, d) = dims;
        let xy = self.xy_divisor();
        let z = self.z_divisor();
        if w % xy != 0 || h % xy != 0 || d % z != 0 || w / xy == 0 || h / xy == 0 || d / z == 0 {
            return Err(UnetError::BadInputShape {
                input: dims,
                xy_div: xy,
                z_div: z,
            });
        }
        Ok(())
    }
}

/// Residual core RC(b): b stacked 3x3x3 conv+ReLU+BN, summed with a 1x1x1
/// projection of the block input, then ReLU+BN after the sum.
pub fn residual_core(
    b: &mut GraphBuilder,
    name: &str,
    src: usize,
    filters: usize,
    depth: usize,
) -> usize {
    let mut h = src;
    for i in 0..depth {
        h = b.conv3d(format!("{name}.conv{i}"), h, filters, (3, 3, 3));
        h = b.relu(format!("{name}.relu{i}"), h);
        h = b.batchnorm(format!("{name}.bn{i}"), h);
    }
    let skip = b.conv3d(format!("{name}.skip"), src, filters, (1, 1, 1));
    let sum = b.add(format!("{name}.sum"), h, skip);
    let post = b.relu(format!("{name}.post_relu"), sum);
    b.batchnorm(format!("{name}.post_bn"), post)
}

/// Bottleneck block BB(b, u): 1x1x1 down to f/2 channels, b 3x3x3 convs at
/// f/2, 1x1x1 back to f, identity skip, then a (1,1,u) transpose convolution
/// that multiplies z by u. Requires an even filter count.
pub fn bottleneck_block(
    b: &mut GraphBuilder,
    name: &str,
    src: usize,
    filters: usize,
    shrink_depth: usize,
    upsample_z: usize,
) -> Result<usize, UnetError> {
    if filters % 2 != 0 {
        return Err(UnetError::BadSpec(format!(
            "bottleneck block needs even filters, got {filters}"
        )));
    }
    let half = filters / 2;
    let mut h = b.conv3d(format!("{name}.squeeze"), src, half, (1, 1, 1));
    h = b.relu(format!("{name}.squeeze_relu"), h);
    h = b.batchnorm(format!("{name}.squeeze_bn"), h);
    for i in 0..shrink_depth {
        h = b.conv3d(format!("{name}.conv{i}"), h, half, (3, 3, 3));
        h = b.relu(format!("{name}.relu{i}"), h);
        h = b.batchnorm(format!("{name}.bn{i}"), h);
    }
    h = b.conv3d(format!("{name}.expand"), h, filters, (1, 1, 1));
    h = b.relu(format!("{name}.expand_relu"), h);
    h = b.batchnorm(format!("{name}.expand_bn"), h);
    let sum = b.add(format!("{name}.sum"), h, src);
    Ok(b.deconv3d(format!("{name}.up"), sum, filters, (1, 1, upsample_z)))
}

/// Builds the full anisotropic U-Net graph for `spec`.
///
/// Encoder: one residual core per level with channel doubling, pooled with
/// (2,2,1) windows on the first log2(k) levels and (2,2,2) after. Decoder:
/// (2,2,2) transpose convolutions, skip connections routed through BB(b, u)
/// with u = k / 2^(level-1) while u > 1 and concatenated directly once the
/// z resolutions already match, a residual core per level, and a final 1x1x1
/// convolution to one channel.
pub fn build_network(spec: &NetworkSpec) -> Result<Graph, UnetError> {
    spec.validate()?;
    let mut b = GraphBuilder::new();
    let input = b.input();
    let levels = spec.levels;
    let aniso = spec.aniso_levels();

    let mut skips = Vec::with_capacity(levels - 1);
    let mut h = input;
    for level in 1..=levels {
        let filters = spec.base_filters << (level - 1);
        h = residual_core(&mut b, &format!("enc{level}"), h, filters, spec.rc_depth);
        if level < levels {
            skips.push(h);
            let window = if level <= aniso { (2, 2, 1) } else { (2, 2, 2) };
            h = b.maxpool(format!("pool{level}"), h, window);
        }
    }

    for level in (1..=levels - 1).rev() {
        let filters = spec.base_filters << (level - 1);
        h = b.deconv3d(format!("up{level}"), h, filters, (2, 2, 2));
        let skip = skips[level - 1];
        let pow = 1usize << (level - 1);
        let skip_path = if pow < spec.k {
            let u = spec.k / pow;
            bottleneck_block(&mut b, &format!("bb{level}"), skip, filters, spec.bb_shrink, u)?
        } else {
            skip
        };
        h = b.concat(format!("cat{level}"), h, skip_path);
        h = residual_core(&mut b, &format!("dec{level}"), h, filters, spec.rc_depth);
    }
    let out = b.conv3d("head", h, 1, (1, 1, 1));
    Ok(b.build(out))
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub lr0: f64,
    pub decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            lr0: 1e-3,
            decay: 1e-6,
            seed: 0,
        }
    }
}

/// Loss trajectory of one training run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

fn batch_tensors(
    lib: &PatchLibrary,
    indices: &[usize],
    expect_low: (usize, usize, usize),
) -> (Tensor5, Tensor5) {
    let (lx, ly, lz) = expect_low;
    let spec = &lib.spec;
    let (hx, hy, hz) = spec.high_size;
    let nb = indices.len();
    let mut low = Vec::with_capacity(nb * lx * ly * lz);
    let mut high = Vec::with_capacity(nb * hx * hy * hz);
    for &i in indices {
        low.extend(lib.pairs[i].low.iter().map(|&v| v as f64));
        high.extend(lib.pairs[i].high.iter().map(|&v| v as f64));
    }
    (
        Tensor5::from_vec([nb, 1, lx, ly, lz], low).expect("batch shape"),
        Tensor5::from_vec([nb, 1, hx, hy, hz], high).expect("batch shape"),
    )
}

fn dataset_mse(
    net: &Graph,
    store: &mut ParamStore,
    lib: &PatchLibrary,
    batch_size: usize,
    mode: Mode,
) -> Result<f64, UnetError> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    let indices: Vec<usize> = (0..lib.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (input, target) = batch_tensors(lib, chunk, lib.spec.low_size);
        let pass = forward(net, store, &input, mode)?;
        let (loss, _) = mse_loss(pass.output(net), &target)?;
        total += loss * target.numel() as f64;
        count += target.numel();
    }
    Ok(total / count as f64)
}

/// Trains the network on `train_lib` with Adam and per-epoch validation on
/// `val_lib`, returning the parameters of the best-validation epoch and the
/// loss history. Fully deterministic per `cfg.seed`.
pub fn train(
    net: &mut Graph,
    train_lib: &PatchLibrary,
    val_lib: &PatchLibrary,
    cfg: &TrainConfig,
) -> Result<(ParamStore, TrainingHistory), UnetError> {
    if train_lib.is_empty() || val_lib.is_empty() {
        return Err(UnetError::EmptyLibrary);
    }
    let spec_low = train_lib.spec.low_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = initialize_params(net, 1, &mut rng)?;

    // shape check against the network contract
    let shapes = activation_shapes(net, [1, 1, spec_low.0, spec_low.1, spec_low.2])?;
    let out_shape = shapes[net.output];
    let (hx, hy, hz) = train_lib.spec.high_size;
    if out_shape[2..] != [hx, hy, hz] {
        return Err(UnetError::LibraryMismatch {
            lib: (hx, hy, hz),
            net: (out_shape[2], out_shape[3], out_shape[4]),
        });
    }

    let adam = AdamConfig {
        lr0: cfg.lr0,
        decay: cfg.decay,
        ..AdamConfig::default()
    };

    let mut history = TrainingHistory::default();
    let mut best: Option<(ParamStore, usize, f64)> = None;
    let mut order: Vec<usize> = (0..train_lib.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_total = 0.0f64;
        let mut train_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (input, target) = batch_tensors(train_lib, chunk, spec_low);
            let pass = forward(
                net,
                &mut store,
                &input,
                Mode::Train {
                    update_running: true,
                },
            )?;
            let (loss, grad) = mse_loss(pass.output(net), &target)?;
            let grads = backward(net, &store, &pass, grad)?;
            adam_step(&mut store, &grads, &adam);
            train_total += loss * target.numel() as f64;
            train_count += target.numel();
        }
        let train_mse = train_total / train_count as f64;
        let val_mse = dataset_mse(net, &mut store, val_lib, cfg.batch_size, Mode::Infer)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            lr: adam.lr_at(store.step),
        });

        let improved = best.as_ref().map_or(true, |(_, _, b)| val_mse < *b);
        if improved {
            best = Some((store.clone(), epoch, val_mse));
        }
        let best_epoch = best.as_ref().map(|(_, e, _)| *e).unwrap_or(epoch);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (best_store, best_epoch, best_val) = best.expect("at least one epoch ran");
    history.best_epoch = best_epoch;
    history.best_val_mse = best_val;
    Ok((best_store, history))
}

/// Predicts a whole volume: patches on the covering grid, batch-norm in
/// inference mode, overlap-averaged assembly. Output dims are
/// (nx, ny, k*nz).
pub fn infer_volume(
    net: &Graph,
    store: &ParamStore,
    lo: &Volume3D,
    patch_spec: &PatchSpec,
) -> Result<Volume3D, UnetError> {
    let origins = covering_grid(lo.dims(), patch_spec)?;
    let (px, py, pz) = patch_spec.low_size;
    let (nx, ny, nz) = lo.dims();
    let mut store = store.clone();
    let mut patches = Vec::with_capacity(origins.len());
    for &(ox, oy, oz) in &origins {
        let mut data = Vec::with_capacity(px * py * pz);
        for z in 0..pz {
            for y in 0..py {
                let base = ((oz + z) * ny + oy + y) * nx + ox;
                data.extend(lo.data()[base..base + px].iter().map(|&v| v as f64));
            }
        }
        let input = Tensor5::from_vec([1, 1, px, py, pz], data).expect("patch shape");
        let pass: ForwardPass = forward(net, &mut store, &input, Mode::Infer)?;
        let out = pass.output(net);
        let high: Vec<f32> = out.data.iter().map(|&v| v as f32).collect();
        patches.push(((ox, oy, patch_spec.k * oz), high));
    }
    let (sx, sy, sz) = lo.spacing();
    let out_dims = (nx, ny, patch_spec.k * nz);
    Ok(assemble(
        &patches,
        patch_spec.high_size,
        out_dims,
        (sx, sy, sz / patch_spec.k as f32),
    )?)
}
