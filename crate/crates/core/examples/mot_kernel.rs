//! Interleaved text/vision sequence through the micro MoT: mask, losses and a short fit.
//!
//!     cargo run --release --example mot_kernel

use embodied_rl::mot::{
    build_mask, fit, next_token_targets, random_sequence, sequence_loss, MaskMode, MotConfig, MotParams, Segment,
    SegmentLayout, SyntheticTeacher, TrainingPhase,
};
use embodied_rl::numerics::RngStream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = MotConfig::default();
    let layout = SegmentLayout::new(
        vec![
            Segment::Text { len: 2 },
            Segment::Vision { len: 3, latent: true },
            Segment::Text { len: 3 },
        ],
        config.max_len,
    )?;
    for mode in [MaskMode::SegmentBidirectional, MaskMode::VisionIsolated] {
        println!("{mode:?}");
        for row in build_mask(&layout, mode) {
            println!("  {}", row.iter().map(|&v| if v { '#' } else { '.' }).collect::<String>());
        }
    }

    let mut rng = RngStream::new(7, 0);
    let mut seq = random_sequence(&config, layout, &mut rng);
    seq.text_targets = next_token_targets(&seq.layout, &seq.token_ids);
    let teacher = SyntheticTeacher::new(config.patch_dim, 7)?;
    let signals = teacher.signals(&seq.elements())?;

    let mut params = MotParams::init(config, &mut rng)?;
    let pre = sequence_loss(&params, &seq, &signals, TrainingPhase::PreTraining)?;
    let mid = sequence_loss(&params, &seq, &signals, TrainingPhase::MidTraining)?;
    println!("pre-training total {:.4} = llm {:.4} + vision {:.4} + global {:.4}", pre.total, pre.llm, pre.vision, pre.global);
    println!("mid-training total {:.4} (language loss only)", mid.total);

    let history = fit(&mut params, &[(seq, signals)], TrainingPhase::PreTraining, 200, 1e-2)?;
    for (i, b) in history.iter().enumerate().step_by(50) {
        println!("step {i:3}: total {:.4}", b.total);
    }
    Ok(())
}
