//! Synthetic ToF / RGB capture: ray-cast transient responses with one-bounce
//! multipath, correlation, phase-to-depth, noise and amplitude preprocessing.

pub mod render;
pub mod scene;
pub mod signal;
pub mod synth;

pub use render::{centre_principal, render_transients, Impulse, RenderOutput, TransientRaster};
pub use scene::{Material, Object, Room, Scene};
pub use signal::{
    add_noise, angular_frequency, correlate, normalize_amplitude, phase_to_depth,
    unambiguous_range, CorrelationPair, PhaseDepth, SPEED_OF_LIGHT,
};
pub use synth::{synthesize_sample, SynthConfig};
