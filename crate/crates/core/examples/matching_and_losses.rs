//! Bipartite matching of queries to ground-truth segments and the three
//! loss terms, on a prediction from an untrained model.

use cmformer::harness::source_splits;
use cmformer::harness::TrainConfig;
use cmformer::ndtensor::Tape;
use cmformer::objective::{build_match_cost, hungarian_match, layer_loss, segments_from_labels, total_loss, CostMatrix, LossWeights};
use cmformer::params::Binder;
use cmformer::segmodel::{ModelConfig, SegModel};
use cmformer::synthbench::CLASS_NAMES;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tiny = CostMatrix::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0], vec![1.0, 1.0, 1.0]]);
    let m = hungarian_match(&tiny)?;
    println!("4 queries × 3 segments: {:?}", m.iter().map(|m| (m.query, m.segment)).collect::<Vec<_>>());

    let cfg = TrainConfig::parse("train_scenes = 1\nval_scenes = 1")?;
    let (train, _) = source_splits(&cfg)?;
    let gt = segments_from_labels(&train.label_map(0), 6)?;
    println!("scene 0 segments: {}", gt.iter().map(|s| CLASS_NAMES[s.class_id]).collect::<Vec<_>>().join(", "));

    let model = SegModel::new(ModelConfig::default(), 0)?;
    let tape = Tape::new();
    let b = Binder::train(&tape, &model.store);
    let out = model.forward(&b, &train.image_tensor(0))?;
    let weights = LossWeights::default();
    let cost = build_match_cost(&out.last().values(), &gt, &weights)?;
    println!("cost matrix {}×{}", cost.rows, cost.cols);
    let last = layer_loss(out.last(), &gt, &weights)?;
    for m in &last.matches {
        println!("  query {:>2} ← {}", m.query, CLASS_NAMES[gt[m.segment].class_id]);
    }
    println!("final stage: ce {:.4}  dice {:.4}  cls {:.4}", last.ce.item(), last.dice.item(), last.cls.item());
    let (loss, parts) = total_loss(&out.predictions, &gt, &weights)?;
    println!(
        "all {} stages: total {:.4} = {}·{:.4} + {}·{:.4} + {}·{:.4}",
        out.predictions.len(),
        loss.item(),
        weights.ce,
        parts.ce,
        weights.dice,
        parts.dice,
        weights.cls,
        parts.cls
    );
    Ok(())
}
