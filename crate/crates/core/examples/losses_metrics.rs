//! Dice plus focal loss on random logits, then confusion-matrix metrics.

use cascadeseg::data::IGNORE;
use cascadeseg::numerics::{Tape, Tensor};
use cascadeseg::objective::{dice_loss, focal_loss, hiou, pixel_loss, Confusion, LossConfig, Targets};
use cascadeseg::text::ClassSplit;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cascadeseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels = [0u16, 1, 2, 2, IGNORE, 1, 0, 3];
    let logits = Tensor::randn([4, labels.len()], 1.0, &mut rng);
    let targets = Targets::new(&labels, 4)?;
    let cfg = LossConfig::default();

    let tape = Tape::new();
    let x = tape.leaf(logits);
    let dice = dice_loss(&tape, &targets, x, cfg.dice_eps)?;
    let focal = focal_loss(&tape, &targets, x, cfg.gamma, cfg.focal_alpha)?;
    let total = pixel_loss(&tape, &targets, x, &cfg)?;
    println!("dice {:.4}  focal {:.5}  total {:.4}", dice.value().item(), focal.value().item(), total.value().item());
    let g = tape.backward(total)?.wrt(x)?;
    println!("gradient on the IGNORE column: {:?}", (0..4).map(|c| g.at(c, 4)).collect::<Vec<_>>());

    let split = ClassSplit::new(
        ["background", "cat", "dog", "zebra"].iter().map(|s| s.to_string()).collect(),
        vec![true, true, true, false],
    )?;
    let mut conf = Confusion::new(4);
    conf.add(&[0, 1, 2, 1, 3, 1, 0, 3], &labels)?;
    let report = conf.report(&split)?;
    print!("{}", report.to_csv());
    println!("hIoU(0.40, 0.60) = {}", hiou(0.40, 0.60));
    Ok(())
}
