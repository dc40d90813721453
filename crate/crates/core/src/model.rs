//! The full restoration network: a 3x3 embedding conv, four encoder levels
//! of transformer blocks with pixel-unshuffle downsampling, a mirrored
//! decoder with pixel-shuffle upsampling and concatenated skips, and a final
//! 3x3 conv whose output is added back onto the input image.
//!
//! Channel widths double per level (`C0 * 2^l`), spatial extents halve.
//! Inputs are reflect-padded on the bottom/right to multiples of 16 so every
//! level keeps even extents, and cropped back before the residual add.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::fdagn::{fdagn_forward, init_fdagn, round_to_even, FdagnCfg};
use crate::fdfa::{fdfa_branch, init_fdfa, DirPlan, FdfaCfg, LambdaMode, QPath};
use crate::gabor::GaborDirs;
use crate::graph::{Graph, Var};
use crate::layers::{conv1x1, conv_same, init_conv, init_layer_norm, layer_norm};
use crate::params::{Binder, ParamStore};
use crate::tensor::{invalid, shape_err, Result, Tensor};

pub const PAD_MULTIPLE: usize = 16;
pub const LEVELS: usize = 4;

/// Which feedforward the blocks use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfnKind {
    /// Plain two-layer pointwise MLP with a GELU in between.
    Ffn,
    /// The frequency-domain gating feedforward.
    Fdagn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub blocks: [usize; LEVELS],
    pub heads: [usize; LEVELS],
    pub expansion: f64,
    pub patch: usize,
    pub q_path: QPath,
    pub dirs: GaborDirs,
    pub lambda: LambdaMode,
    pub ffn: FfnKind,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: small enough to train on a CPU.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            base_channels: 8,
            blocks: [4, 6, 6, 8],
            heads: [1, 2, 4, 8],
            expansion: 2.66,
            patch: 8,
            q_path: QPath::Fused,
            dirs: GaborDirs::Matched,
            lambda: LambdaMode::Adaptive,
            ffn: FfnKind::Fdagn,
            seed: 0,
        }
    }

    /// Full-scale configuration, kept for documentation and parameter
    /// counting; training it is out of desk scope.
    pub fn full() -> ModelConfig {
        ModelConfig { base_channels: 48, ..ModelConfig::desk() }
    }

    /// Smallest legal network (one block per level), used by the gradient
    /// suite where every finite-difference probe costs a forward pass.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            blocks: [1, 1, 1, 1],
            ..ModelConfig::desk()
        }
    }

    /// Channel width of level `l` (0-based).
    pub fn width(&self, l: usize) -> usize {
        self.base_channels << l
    }

    pub fn check(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(invalid("model", "base_channels must be positive".into()));
        }
        if !self.patch.is_power_of_two() {
            return Err(invalid("model", format!("patch {} not a power of two", self.patch)));
        }
        if self.expansion <= 0.0 {
            return Err(invalid("model", "expansion must be positive".into()));
        }
        for l in 0..LEVELS {
            if self.heads[l] == 0 || self.width(l) % self.heads[l] != 0 {
                return Err(invalid(
                    "model",
                    format!(
                        "level {} width {} not divisible by heads {}",
                        l + 1,
                        self.width(l),
                        self.heads[l]
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Canonical one-line description; every field that changes behavior is
    /// included, so equal strings mean interchangeable checkpoints.
    pub fn canonical(&self) -> String {
        let dirs = match self.dirs {
            GaborDirs::Matched => "matched".to_string(),
            GaborDirs::Misaligned => "misaligned".to_string(),
            GaborDirs::Unified(t) => format!("unified:{t}"),
            GaborDirs::Random => "random".to_string(),
            GaborDirs::Fused => "fused".to_string(),
            GaborDirs::ConvOnly => "conv".to_string(),
        };
        let lambda = match self.lambda {
            LambdaMode::Adaptive => "adaptive".to_string(),
            LambdaMode::Fixed(v) => format!("fixed:{v}"),
        };
        let q = match self.q_path {
            QPath::Plain => "plain",
            QPath::Dwt => "dwt",
            QPath::Gabor => "gabor",
            QPath::Fused => "fused",
        };
        let ffn = match self.ffn {
            FfnKind::Ffn => "ffn",
            FfnKind::Fdagn => "fdagn",
        };
        format!(
            "dabformer;c0={};blocks={},{},{},{};heads={},{},{},{};exp={};patch={};q={q};dirs={dirs};lambda={lambda};ffn={ffn};seed={}",
            self.base_channels,
            self.blocks[0], self.blocks[1], self.blocks[2], self.blocks[3],
            self.heads[0], self.heads[1], self.heads[2], self.heads[3],
            self.expansion, self.patch, self.seed,
        )
    }

    /// SHA-256 of the canonical description; embedded in checkpoints.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        h.finalize().into()
    }
}

/// Per-block RNG for direction resolution, independent of the sequential
/// weight-init stream so forward passes can recreate the plan on their own.
fn dir_rng(seed: u64, prefix: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(prefix.as_bytes());
    let d = h.finalize();
    let tag = u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"));
    ChaCha8Rng::seed_from_u64(seed ^ tag)
}

fn fdfa_cfg_for(cfg: &ModelConfig, prefix: &str, channels: usize, heads: usize) -> Result<FdfaCfg> {
    let mut rng = dir_rng(cfg.seed, prefix);
    Ok(FdfaCfg {
        channels,
        heads,
        q_path: cfg.q_path,
        dirs: DirPlan::resolve(cfg.dirs, &mut rng)?,
        lambda: cfg.lambda,
    })
}

fn fdagn_cfg_for(cfg: &ModelConfig, channels: usize) -> FdagnCfg {
    FdagnCfg { channels, expansion: cfg.expansion, patch: cfg.patch }
}

fn init_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c: usize,
    heads: usize,
    cfg: &ModelConfig,
) -> Result<()> {
    init_layer_norm(store, &format!("{prefix}.ln1"), c)?;
    let fcfg = fdfa_cfg_for(cfg, prefix, c, heads)?;
    init_fdfa(store, rng, &format!("{prefix}.attn"), &fcfg)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), c)?;
    match cfg.ffn {
        FfnKind::Fdagn => init_fdagn(store, rng, &format!("{prefix}.ffn"), &fdagn_cfg_for(cfg, c)),
        FfnKind::Ffn => {
            let ch = round_to_even(c as f64 * cfg.expansion);
            init_conv(store, rng, &format!("{prefix}.ffn.fc1"), ch, c, 1)?;
            init_conv(store, rng, &format!("{prefix}.ffn.fc2"), c, ch, 1)
        }
    }
}

/// Register every model parameter, in forward order.
pub fn init_model(store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_conv(store, &mut rng, "embed", cfg.base_channels, 3, 3)?;
    for l in 0..LEVELS {
        let c = cfg.width(l);
        for i in 0..cfg.blocks[l] {
            init_block(store, &mut rng, &format!("enc{}.b{}", l + 1, i), c, cfg.heads[l], cfg)?;
        }
        init_conv(store, &mut rng, &format!("down{}", l + 1), 2 * c, 4 * c, 1)?;
    }
    for l in (0..LEVELS).rev() {
        let c = cfg.width(l);
        init_conv(store, &mut rng, &format!("up{}", l + 1), 4 * c, 2 * c, 1)?;
        init_conv(store, &mut rng, &format!("fuse{}", l + 1), c, 2 * c, 1)?;
        for i in 0..cfg.blocks[l] {
            init_block(store, &mut rng, &format!("dec{}.b{}", l + 1, i), c, cfg.heads[l], cfg)?;
        }
    }
    init_conv(store, &mut rng, "final", 3, cfg.base_channels, 3)
}

fn block_forward_inner(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x: Var,
    c: usize,
    heads: usize,
    cfg: &ModelConfig,
) -> Result<Var> {
    let fcfg = fdfa_cfg_for(cfg, prefix, c, heads)?;
    let n1 = layer_norm(g, b, &format!("{prefix}.ln1"), x)?;
    let attn = fdfa_branch(g, b, &format!("{prefix}.attn"), n1, &fcfg)?;
    let x1 = g.add(x, attn)?;
    let n2 = layer_norm(g, b, &format!("{prefix}.ln2"), x1)?;
    let ffn = match cfg.ffn {
        FfnKind::Fdagn => fdagn_forward(g, b, &format!("{prefix}.ffn"), n2, &fdagn_cfg_for(cfg, c))?,
        FfnKind::Ffn => {
            let h = conv1x1(g, b, &format!("{prefix}.ffn.fc1"), n2)?;
            let a = g.gelu(h)?;
            conv1x1(g, b, &format!("{prefix}.ffn.fc2"), a)?
        }
    };
    g.add(x1, ffn)
}

/// One pre-norm transformer block: attention residual, then feedforward
/// residual. Errors carry the block name.
pub fn block_forward(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x: Var,
    c: usize,
    heads: usize,
    cfg: &ModelConfig,
) -> Result<Var> {
    block_forward_inner(g, b, prefix, x, c, heads, cfg).map_err(|e| e.in_layer(prefix))
}

/// Full forward pass; output shape equals input shape, with the input added
/// back so the network learns a residual.
pub fn model_forward(g: &mut Graph, b: &mut Binder, cfg: &ModelConfig, x: Var) -> Result<Var> {
    cfg.check()?;
    let (bb, cin, h, w) = g.val(x).dims4("model")?;
    if cin != 3 {
        return Err(shape_err("model", format!("expected 3 input channels, got {cin}")));
    }
    if h < PAD_MULTIPLE || w < PAD_MULTIPLE {
        return Err(invalid(
            "model",
            format!("input {h}x{w} below the {PAD_MULTIPLE} px minimum"),
        ));
    }
    let hp = h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let wp = w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let padded = if hp == h && wp == w { x } else { g.reflect_pad2d(x, hp - h, wp - w)? };

    let mut cur = conv_same(g, b, "embed", padded).map_err(|e| e.in_layer("embed"))?;
    let mut skips = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        let c = cfg.width(l);
        for i in 0..cfg.blocks[l] {
            cur = block_forward(g, b, &format!("enc{}.b{}", l + 1, i), cur, c, cfg.heads[l], cfg)?;
        }
        skips.push(cur);
        let down = g.pixel_unshuffle(cur, 2)?;
        let name = format!("down{}", l + 1);
        cur = conv1x1(g, b, &name, down).map_err(|e| e.in_layer(&name))?;
        assert_eq!(
            g.val(cur).shape(),
            [bb, 2 * c, hp >> (l + 1), wp >> (l + 1)].as_slice(),
            "encoder level {} output shape",
            l + 1
        );
    }
    for l in (0..LEVELS).rev() {
        let c = cfg.width(l);
        let name = format!("up{}", l + 1);
        let up = conv1x1(g, b, &name, cur).map_err(|e| e.in_layer(&name))?;
        let up = g.pixel_shuffle(up, 2)?;
        let cat = g.concat_c(&[up, skips[l]])?;
        let name = format!("fuse{}", l + 1);
        cur = conv1x1(g, b, &name, cat).map_err(|e| e.in_layer(&name))?;
        for i in 0..cfg.blocks[l] {
            cur = block_forward(g, b, &format!("dec{}.b{}", l + 1, i), cur, c, cfg.heads[l], cfg)?;
        }
    }
    let res = conv_same(g, b, "final", cur).map_err(|e| e.in_layer("final"))?;
    let res = if hp == h && wp == w { res } else { g.crop2d(res, h, w)? };
    g.add(res, x)
}

pub fn param_count(store: &ParamStore) -> usize {
    store.num_scalars()
}

/// Per-module parameter counts, grouped by the first name segment, in
/// registration order; last line is the total.
pub fn model_summary(cfg: &ModelConfig) -> Result<String> {
    let mut store = ParamStore::new();
    init_model(&mut store, cfg)?;
    let mut order: Vec<String> = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for (name, t) in store.iter() {
        let top = name.split('.').next().unwrap_or(name).to_string();
        if !counts.contains_key(&top) {
            order.push(top.clone());
        }
        *counts.entry(top).or_insert(0) += t.numel();
    }
    let mut out = String::new();
    out.push_str("module,params\n");
    for top in &order {
        out.push_str(&format!("{},{}\n", top, counts[top]));
    }
    out.push_str(&format!("total,{}\n", store.num_scalars()));
    Ok(out)
}

/// Zero every conv weight and bias (names ending `.w` / `.b`), leaving norm
/// affine terms, wavelengths, temperatures and spectral filters at their
/// init. With all of these zeroed the network is an exact identity.
pub fn zero_all_convs(store: &mut ParamStore) {
    let names: Vec<String> = store
        .iter()
        .filter(|(n, _)| n.ends_with(".w") || n.ends_with(".b"))
        .map(|(n, _)| n.to_string())
        .collect();
    for n in names {
        let shape = store.get(&n).expect("name listed above").shape().to_vec();
        store.set(&n, Tensor::zeros(&shape)).expect("same shape");
    }
}

// -- checkpoints ----------------------------------------------------------

pub const CKPT_MAGIC: [u8; 4] = *b"DABF";
pub const CKPT_VERSION: u32 = 1;

/// On-disk snapshot: a config fingerprint plus named tensors in a fixed
/// order. Training checkpoints append optimizer state under `optim/`.
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(fingerprint: [u8; 32], store: &ParamStore) -> Checkpoint {
        let entries = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Checkpoint { fingerprint, entries }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)
            .map_err(|e| invalid("checkpoint", format!("create {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| invalid("checkpoint", format!("write: {e}"));
        w.write_all(&CKPT_MAGIC).map_err(io)?;
        w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&self.fingerprint).map_err(io)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(io)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path)
            .map_err(|e| invalid("checkpoint", format!("open {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let io = |e: std::io::Error| invalid("checkpoint", format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if magic != CKPT_MAGIC {
            return Err(invalid("checkpoint", format!("bad magic {magic:?}")));
        }
        let mut u4 = [0u8; 4];
        r.read_exact(&mut u4).map_err(io)?;
        let version = u32::from_le_bytes(u4);
        if version != CKPT_VERSION {
            return Err(invalid("checkpoint", format!("unsupported version {version}")));
        }
        let mut fingerprint = [0u8; 32];
        r.read_exact(&mut fingerprint).map_err(io)?;
        r.read_exact(&mut u4).map_err(io)?;
        let count = u32::from_le_bytes(u4) as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            r.read_exact(&mut u4).map_err(io)?;
            let name_len = u32::from_le_bytes(u4) as usize;
            if name_len > 4096 {
                return Err(invalid("checkpoint", format!("name length {name_len} corrupt")));
            }
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf).map_err(io)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| invalid("checkpoint", "non-utf8 tensor name".into()))?;
            r.read_exact(&mut u4).map_err(io)?;
            let rank = u32::from_le_bytes(u4) as usize;
            if rank > 8 {
                return Err(invalid("checkpoint", format!("rank {rank} corrupt")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut u8b = [0u8; 8];
            for _ in 0..rank {
                r.read_exact(&mut u8b).map_err(io)?;
                shape.push(u64::from_le_bytes(u8b) as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > (1 << 30) {
                return Err(invalid("checkpoint", format!("element count {numel} corrupt")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                r.read_exact(&mut u8b).map_err(io)?;
                data.push(f64::from_le_bytes(u8b));
            }
            entries.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Checkpoint { fingerprint, entries })
    }

    /// Reject checkpoints written under a different model configuration.
    pub fn require_fingerprint(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.fingerprint != expected {
            return Err(invalid(
                "checkpoint",
                "config fingerprint mismatch: checkpoint was written by a different model configuration".into(),
            ));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copy model parameters into an initialized store. Every store entry
    /// must be present; extra checkpoint entries (optimizer state) are
    /// ignored.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        let index: HashMap<&str, &Tensor> =
            self.entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = index
                .get(name.as_str())
                .ok_or_else(|| invalid("checkpoint", format!("missing parameter {name:?}")))?;
            store.set(&name, (*t).clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use tempfile::tempdir;

    fn rand_image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn forward_values(cfg: &ModelConfig, store: &ParamStore, x: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let mut b = Binder::new(store, false);
        let xv = g.constant(x.clone());
        let y = model_forward(&mut g, &mut b, cfg, xv).unwrap();
        g.val(y).data().to_vec()
    }

    #[test]
    fn initialization_is_deterministic_in_the_seed() {
        let cfg = ModelConfig::tiny();
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        init_model(&mut s1, &cfg).unwrap();
        init_model(&mut s2, &cfg).unwrap();
        assert_eq!(s1.len(), s2.len());
        for ((n1, t1), (n2, t2)) in s1.iter().zip(s2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "{n1}");
        }
        let mut s3 = ParamStore::new();
        init_model(&mut s3, &ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(
            s1.get("embed.w").unwrap().data(),
            s3.get("embed.w").unwrap().data(),
            "different seeds must give different weights"
        );
    }

    #[test]
    fn zeroed_convolutions_make_the_model_an_identity() {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        init_model(&mut store, &cfg).unwrap();
        zero_all_convs(&mut store);
        let x = rand_image(&[1, 3, 17, 23], 3);
        let y = forward_values(&cfg, &store, &x);
        assert_eq!(y, x.data(), "residual-only model must reproduce the input bitwise");
    }

    #[test]
    fn output_shape_tracks_input_shape() {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        init_model(&mut store, &cfg).unwrap();
        for (h, w) in [(17, 17), (32, 48), (48, 17)] {
            let x = rand_image(&[1, 3, h, w], 4);
            let mut g = Graph::new();
            let mut b = Binder::new(&store, false);
            let xv = g.constant(x);
            let y = model_forward(&mut g, &mut b, &cfg, xv).unwrap();
            assert_eq!(g.val(y).shape(), &[1, 3, h, w]);
        }
    }

    #[test]
    fn undersized_and_misshaped_inputs_are_rejected() {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        init_model(&mut store, &cfg).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let small = g.constant(Tensor::zeros(&[1, 3, 15, 64]));
        assert!(model_forward(&mut g, &mut b, &cfg, small).is_err());
        let gray = g.constant(Tensor::zeros(&[1, 1, 32, 32]));
        assert!(model_forward(&mut g, &mut b, &cfg, gray).is_err());
    }

    #[test]
    fn single_conv_parameter_count_closed_form() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_conv(&mut store, &mut rng, "embed", 8, 3, 3).unwrap();
        assert_eq!(store.num_scalars(), 3 * 8 * 9 + 8);
    }

    #[test]
    fn summary_groups_sum_to_the_total() {
        let cfg = ModelConfig::tiny();
        let summary = model_summary(&cfg).unwrap();
        let mut total_line = 0usize;
        let mut sum = 0usize;
        for line in summary.lines().skip(1) {
            let (name, count) = line.split_once(',').unwrap();
            let count: usize = count.parse().unwrap();
            if name == "total" {
                total_line = count;
            } else {
                sum += count;
            }
        }
        assert_eq!(sum, total_line);
        let mut store = ParamStore::new();
        init_model(&mut store, &cfg).unwrap();
        assert_eq!(total_line, store.num_scalars());
        assert!(summary.starts_with("module,params\nembed,112\n"), "{summary}");

        let desk = model_summary(&ModelConfig::desk()).unwrap();
        assert!(desk.starts_with("module,params\nembed,224\n"), "{desk}");
    }

    #[test]
    fn fingerprints_separate_configurations() {
        let desk = ModelConfig::desk();
        let mut fps = vec![
            desk.fingerprint(),
            ModelConfig::full().fingerprint(),
            ModelConfig { seed: 9, ..desk.clone() }.fingerprint(),
            ModelConfig { q_path: QPath::Plain, ..desk.clone() }.fingerprint(),
            ModelConfig { ffn: FfnKind::Ffn, ..desk.clone() }.fingerprint(),
            ModelConfig { dirs: GaborDirs::Unified(0.5), ..desk.clone() }.fingerprint(),
        ];
        assert_eq!(desk.fingerprint(), ModelConfig::desk().fingerprint());
        fps.sort();
        fps.dedup();
        assert_eq!(fps.len(), 6, "every config change must move the fingerprint");
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        init_model(&mut store, &cfg).unwrap();
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.dabf");
        let p2 = dir.path().join("b.dabf");
        let ck = Checkpoint::from_store(cfg.fingerprint(), &store);
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.require_fingerprint(&cfg.fingerprint()).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let x = rand_image(&[1, 3, 16, 16], 5);
        let before = forward_values(&cfg, &store, &x);
        let mut restored = ParamStore::new();
        init_model(&mut restored, &ModelConfig { seed: 7, ..cfg.clone() }).unwrap();
        loaded.apply_to(&mut restored).unwrap();
        let after = forward_values(&cfg, &restored, &x);
        assert_eq!(before, after, "forward must be bitwise identical after reload");
        assert_eq!(store.num_scalars(), restored.num_scalars());
    }

    #[test]
    fn checkpoint_rejects_corruption_and_mismatch() {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        init_model(&mut store, &cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.dabf");
        Checkpoint::from_store(cfg.fingerprint(), &store).save(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let bad_magic = dir.path().join("bad_magic.dabf");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(Checkpoint::load(&bad_magic).is_err());

        let truncated = dir.path().join("trunc.dabf");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Checkpoint::load(&truncated).is_err());

        let other = ModelConfig { seed: 42, ..cfg };
        let ck = Checkpoint::load(&path).unwrap();
        assert!(ck.require_fingerprint(&other.fingerprint()).is_err());

        let mut partial = Checkpoint::load(&path).unwrap();
        partial.entries.retain(|(n, _)| n != "embed.w");
        assert!(partial.apply_to(&mut store).is_err(), "missing tensor must be detected");
    }

    #[test]
    fn block_output_minus_input_equals_the_two_branch_terms() {
        let cfg = ModelConfig { base_channels: 4, ..ModelConfig::tiny() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_block(&mut store, &mut rng, "t", 4, 1, &cfg).unwrap();
        let x = rand_image(&[1, 4, 8, 8], 12);

        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let xv = g.constant(x.clone());
        let y = block_forward(&mut g, &mut b, "t", xv, 4, 1, &cfg).unwrap();

        let mut g2 = Graph::new();
        let mut b2 = Binder::new(&store, false);
        let x2 = g2.constant(x.clone());
        let fcfg = fdfa_cfg_for(&cfg, "t", 4, 1).unwrap();
        let n1 = layer_norm(&mut g2, &mut b2, "t.ln1", x2).unwrap();
        let attn = fdfa_branch(&mut g2, &mut b2, "t.attn", n1, &fcfg).unwrap();
        let x1 = g2.add(x2, attn).unwrap();
        let n2 = layer_norm(&mut g2, &mut b2, "t.ln2", x1).unwrap();
        let ffn =
            fdagn_forward(&mut g2, &mut b2, "t.ffn", n2, &fdagn_cfg_for(&cfg, 4)).unwrap();

        for i in 0..x.numel() {
            let lhs = g.val(y).data()[i] - x.data()[i];
            let rhs = g2.val(attn).data()[i] + g2.val(ffn).data()[i];
            assert!((lhs - rhs).abs() <= 1e-12, "at {i}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn random_direction_plans_are_stable_across_forwards() {
        let cfg = ModelConfig {
            dirs: GaborDirs::Random,
            ..ModelConfig { base_channels: 4, ..ModelConfig::tiny() }
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        init_block(&mut store, &mut rng, "r", 4, 1, &cfg).unwrap();
        let x = rand_image(&[1, 4, 8, 8], 14);
        let runs: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let mut g = Graph::new();
                let mut b = Binder::new(&store, false);
                let xv = g.constant(x.clone());
                let y = block_forward(&mut g, &mut b, "r", xv, 4, 1, &cfg).unwrap();
                g.val(y).data().to_vec()
            })
            .collect();
        assert_eq!(runs[0], runs[1]);
        let other = fdfa_cfg_for(&cfg, "other", 4, 1).unwrap();
        let here = fdfa_cfg_for(&cfg, "r", 4, 1).unwrap();
        assert_ne!(other.dirs, here.dirs, "plans should vary across blocks");
    }

    #[test]
    fn failed_blocks_name_themselves() {
        // A store whose enc1.b0 attention weights are missing produces an
        // error mentioning the block.
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        init_model(&mut store, &cfg).unwrap();
        let mut g = Graph::new();
        // Trainable binder against an empty store fails at the first lookup.
        let empty = ParamStore::new();
        let mut b = Binder::new(&empty, false);
        let x = g.constant(Tensor::zeros(&[1, 3, 16, 16]));
        let err = model_forward(&mut g, &mut b, &cfg, x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("embed"), "error should carry the failing layer: {msg}");
    }
}
