//! Single-image restoration: read, pad/forward/crop inside the model,
//! clamp to the unit range, write.

use std::path::Path;

use anyhow::{anyhow, bail, Result};

use dabformer_core::graph::Graph;
use dabformer_core::harness;
use dabformer_core::model::{self, Checkpoint};
use dabformer_core::params::{Binder, ParamStore};

use crate::config::RunConfig;

pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let img = harness::read_image(input).map_err(|e| anyhow!("{e}"))?;
    let (_, _, h, w) = img.dims4("infer").map_err(|e| anyhow!("{e}"))?;
    if h < 16 || w < 16 {
        bail!("input {h}x{w} below the 16px minimum");
    }

    let ck = Checkpoint::load(checkpoint).map_err(|e| anyhow!("{e}"))?;
    ck.require_fingerprint(&cfg.model.fingerprint())
        .map_err(|e| anyhow!("checkpoint/config mismatch: {e}"))?;
    let mut store = ParamStore::new();
    model::init_model(&mut store, &cfg.model).map_err(|e| anyhow!("{e}"))?;
    ck.apply_to(&mut store).map_err(|e| anyhow!("{e}"))?;

    let mut g = Graph::new();
    let mut b = Binder::new(&store, false);
    let x = g.constant(img);
    let y = model::model_forward(&mut g, &mut b, &cfg.model, x).map_err(|e| anyhow!("{e}"))?;
    let restored = g.val(y).map(|v| v.clamp(0.0, 1.0));
    harness::write_image(output, &restored).map_err(|e| anyhow!("{e}"))
}
