//! A small self-contained diffusion stack: linear noise schedule, DDIM
//! stepping, a residual conv denoiser with sinusoidal timestep embedding and
//! procedural toy datasets.

mod data;
mod denoiser;
mod sampler;
pub(crate) mod schedule;

pub use data::{gen_dataset, Family, ToyDatasetSpec};
pub use denoiser::{Bindings, DenoiserConfig, DenseLayer, Denoiser, Layer, ScaleChoice, Slot};
pub use sampler::{predict_noise, sample, timestep_sequence, SampleConfig, SampleOutput, ScaleSource, Visit};
pub use schedule::{add_noise, ddim_step, make_schedule, DdimStep, NoiseSchedule, ScheduleConfig};
