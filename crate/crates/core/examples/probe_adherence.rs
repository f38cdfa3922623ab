//! Throwaway: adherence of REAL composed pairs through the oracle.
use duogan_core::dataset::PairedDataset;
use duogan_core::diagnostics::{condition_adherence, load_oracle};
use duogan_core::{ConditionSchema, LabeledBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn main() {
    let ds = PairedDataset::from_files(
        Path::new("data/mnist/train-images-idx3-ubyte"),
        Path::new("data/mnist/train-labels-idx1-ubyte"),
        ConditionSchema::digits(),
    )
    .unwrap();
    let mut oracle = load_oracle(Path::new("/root/scratch/oracle.bin")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = ds.compose(256, &mut rng);
    let batch = LabeledBatch::from_samples(&samples);
    let adh = condition_adherence(&batch.images, &batch.conditions, &mut oracle).unwrap();
    println!("real-pair adherence: {adh:.4}");
}
