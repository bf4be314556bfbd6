//! Stage schedule for training: four progressive fine-tuning stages that
//! adapt the audio pathway while the text decoder stays frozen, then an
//! instruction-tuning stage that updates only the low-rank adapters and the
//! soft prompt. Provides gradient accumulation over micro-batches with a
//! single optimizer step per effective batch.

use crate::error::{Error, Result};
use crate::tensor::{gradient_map, Adam, Bound, Matrix, ParamStore, Tape, Var};
use indexmap::IndexMap;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum StageId {
    Ft1,
    Ft2,
    Ft3,
    Ft4,
    It,
}

impl StageId {
    pub const ALL: [StageId; 5] = [
        StageId::Ft1,
        StageId::Ft2,
        StageId::Ft3,
        StageId::Ft4,
        StageId::It,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ft1" => Ok(StageId::Ft1),
            "ft2" => Ok(StageId::Ft2),
            "ft3" => Ok(StageId::Ft3),
            "ft4" => Ok(StageId::Ft4),
            "it" => Ok(StageId::It),
            other => Err(Error::config(format!(
                "unknown stage '{other}' (expected ft1..ft4 or it)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageId::Ft1 => "ft1",
            StageId::Ft2 => "ft2",
            StageId::Ft3 => "ft3",
            StageId::Ft4 => "ft4",
            StageId::It => "it",
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageConfig {
    pub id: StageId,
    pub lr: f64,
    /// micro-batch size per forward/backward
    pub micro_batch: usize,
    /// examples per optimizer step, reached by gradient accumulation
    pub effective_batch: usize,
}

impl StageConfig {
    /// Reference schedule: lr 1e-4 everywhere, effective batch 256,
    /// micro-batch 4 for the first stage and 2 afterwards.
    pub fn defaults(id: StageId) -> Self {
        StageConfig {
            id,
            lr: 1e-4,
            micro_batch: if id == StageId::Ft1 { 4 } else { 2 },
            effective_batch: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.effective_batch == 0 {
            return Err(Error::config("batch sizes must be >= 1"));
        }
        if self.effective_batch % self.micro_batch != 0 {
            return Err(Error::config(format!(
                "effective batch {} must divide by micro-batch {}",
                self.effective_batch, self.micro_batch
            )));
        }
        Ok(())
    }
}

/// Whether a parameter is updated in the given stage. The decoder base is
/// frozen in every stage; the soft prompt and adapters are exclusive to
/// instruction tuning.
pub fn is_trainable(stage: StageId, name: &str) -> bool {
    match stage {
        StageId::It => name.starts_with("lora.") || name == "soft_prompt",
        _ => !name.starts_with("decoder.") && name != "soft_prompt",
    }
}

/// Apply the stage's freeze pattern to every parameter flag.
pub fn apply_stage(store: &mut ParamStore, stage: StageId) {
    store.set_trainable_where(|name| is_trainable(stage, name));
}

/// Run `micro_batches` forward/backward passes and return the averaged
/// trainable-parameter gradients together with the mean loss.
pub fn accumulate_gradients<F>(
    store: &ParamStore,
    micro_batches: usize,
    mut loss_fn: F,
) -> Result<(IndexMap<String, Matrix>, f64)>
where
    F: FnMut(&mut Tape, &Bound, usize) -> Result<Var>,
{
    if micro_batches == 0 {
        return Err(Error::validation("empty batch"));
    }
    let mut accum: IndexMap<String, Matrix> = IndexMap::new();
    let mut total_loss = 0.0;
    for m in 0..micro_batches {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = loss_fn(&mut tape, &bound, m)?;
        total_loss += tape.scalar(loss)?;
        tape.backward(loss)?;
        for (name, grad) in gradient_map(&tape, store, &bound) {
            match accum.get_mut(&name) {
                Some(g) => g.add_assign(&grad),
                None => {
                    accum.insert(name, grad);
                }
            }
        }
    }
    let inv = 1.0 / micro_batches as f64;
    for g in accum.values_mut() {
        *g = g.scale(inv);
    }
    Ok((accum, total_loss * inv))
}

/// One optimizer step over an accumulated batch; returns the mean loss.
pub fn training_step<F>(
    store: &mut ParamStore,
    opt: &mut Adam,
    micro_batches: usize,
    loss_fn: F,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &Bound, usize) -> Result<Var>,
{
    let (grads, mean_loss) = accumulate_gradients(store, micro_batches, loss_fn)?;
    opt.step(store, &grads);
    Ok(mean_loss)
}
