//! Offline merging of low-rank adapters into their base projection weights.

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, ParamStore};

/// merged = base + scale * down^T * up^T, matching the runtime delta
/// x * down^T * up^T added to x * base.
pub fn lora_merge(base: &Matrix, down: &Matrix, up: &Matrix, scale: f64) -> Result<Matrix> {
    if down.rows != up.cols || base.rows != down.cols || base.cols != up.rows {
        return Err(Error::shape(format!(
            "merge shapes incompatible: base {}x{}, down {}x{}, up {}x{}",
            base.rows, base.cols, down.rows, down.cols, up.rows, up.cols
        )));
    }
    let delta = down.matmul_tn(&up.transpose())?;
    base.add(&delta.scale(scale))
}

/// Fold every decoder adapter into its base weight and zero the `up`
/// factors, so subsequent adapter-enabled forwards are unchanged no-ops.
pub fn merge_lora_into_decoder(store: &mut ParamStore, cfg: &DecoderConfig) -> Result<()> {
    let lora = cfg
        .lora
        .as_ref()
        .ok_or_else(|| Error::config("decoder config has no adapters to merge"))?;
    for l in 0..cfg.depth {
        for proj in ["wq", "wv"] {
            let p = format!("lora.decoder.l{l}.{proj}");
            let down = store.get(&format!("{p}.down"))?.value.clone();
            let up = store.get(&format!("{p}.up"))?.value.clone();
            let base_name = format!("decoder.l{l}.attn.{proj}.w");
            let merged = lora_merge(&store.get(&base_name)?.value, &down, &up, lora.scale())?;
            store.get_mut(&base_name)?.value = merged;
            store.get_mut(&format!("{p}.up"))?.value.data.fill(0.0);
        }
    }
    Ok(())
}
