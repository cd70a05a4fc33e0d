//! Fixtures shared by the benchmarks.

use diffcam::harness::SampleInput;
use diffcam::synth::{generate, SynthSpec};

/// A corpus-style scene on an `h`×`w` token grid.
pub fn scene_input(h: usize, w: usize, seed: u64) -> SampleInput {
    let spec = SynthSpec {
        grid: (h, w),
        image_size: (4 * h, 4 * w),
        ..SynthSpec::corpus(seed)
    };
    SampleInput::from_scene(&generate(&spec).expect("valid synth spec"))
}
