//! Generation, training, checkpointing and evaluation together.

use nearid::eval::{evaluate, EvalOptions, Frozen, Kernel};
use nearid::format::EmbeddingFile;
use nearid::head::{embed_grids, HeadParams};
use nearid::synthworld::{SynthWorld, WorldConfig};
use nearid::train::{train, TrainConfig};

fn small_world() -> SynthWorld {
    SynthWorld::generate(WorldConfig { n_identities: 120, ..Default::default() }).unwrap()
}

fn short_run() -> TrainConfig {
    TrainConfig { epochs: 20, warmup_steps: 10, batch_identities: 16, ..Default::default() }
}

#[test]
fn training_beats_the_frozen_baseline() {
    let world = small_world();
    let frozen = evaluate(&world, &Frozen, &EvalOptions::default()).unwrap();
    let out = train(&world, &short_run(), |_| {}).unwrap();
    let trained = evaluate(&world, &out.params, &EvalOptions::default()).unwrap();
    assert!(frozen.ssr < 0.6);
    assert!(trained.ssr > frozen.ssr, "{} vs {}", trained.ssr, frozen.ssr);
    assert!(trained.pa > frozen.pa);
    let first = &out.log[0];
    let last = out.log.last().unwrap();
    assert!(last.loss < first.loss, "{} -> {}", first.loss, last.loss);
}

#[test]
fn checkpoint_reload_reproduces_embeddings_and_report() {
    let world = small_world();
    let cfg = TrainConfig { epochs: 2, warmup_steps: 1, ..short_run() };
    let params = train(&world, &cfg, |_| {}).unwrap().params;
    let mut buf = Vec::new();
    params.save(&mut buf).unwrap();
    let back = HeadParams::load(buf.as_slice()).unwrap();

    let ids: Vec<u64> = (0..50).collect();
    let grids = world.grids(&ids);
    assert_eq!(embed_grids(&params, &grids).unwrap(), embed_grids(&back, &grids).unwrap());

    let opts = EvalOptions { kpca: Some(Kernel::Linear), ..Default::default() };
    let a = evaluate(&world, &params, &opts).unwrap();
    let b = evaluate(&world, &back, &opts).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn manifest_round_trip_rebuilds_the_same_world() {
    let world = small_world();
    let mut buf = Vec::new();
    world.write_manifest(&mut buf).unwrap();
    let samples = SynthWorld::read_manifest(buf.as_slice()).unwrap();
    let again = SynthWorld::from_manifest(world.config.clone(), samples).unwrap();
    for id in [0u64, 17, 400, world.samples.len() as u64 - 1] {
        assert_eq!(world.grid(id).tokens, again.grid(id).tokens);
    }
    let mut buf2 = Vec::new();
    again.write_manifest(&mut buf2).unwrap();
    assert_eq!(buf, buf2);
}

#[test]
fn embeddings_survive_the_file_format_at_f32_precision() {
    let world = small_world();
    let ids: Vec<u64> = (0..64).collect();
    let z = Frozen.embed_rows(&world.grids(&ids));
    let file = EmbeddingFile::from_embeddings(&z).unwrap();
    let bytes = file.to_bytes();
    let back = EmbeddingFile::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    for (row, orig) in back.rows_f64().iter().zip(&z) {
        for (a, b) in row.iter().zip(orig) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

trait EmbedRows {
    fn embed_rows(&self, grids: &[ndarray::Array2<f64>]) -> Vec<Vec<f64>>;
}

impl<E: nearid::eval::Encoder> EmbedRows for E {
    fn embed_rows(&self, grids: &[ndarray::Array2<f64>]) -> Vec<Vec<f64>> {
        self.embed(grids).unwrap().rows().into_iter().map(|r| r.to_vec()).collect()
    }
}
