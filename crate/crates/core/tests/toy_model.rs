use std::collections::BTreeMap;
use std::fs::File;
use std::path::PathBuf;

use rand::Rng;

use biasaudit::corpus::{load_names, write_names, CategorySet, Dimension, NameTable};
use biasaudit::deskmodel::train::{train_toy_transformer, training_corpus, CorpusMix, TrainConfig};
use biasaudit::deskmodel::vocab::SEP;
use biasaudit::deskmodel::world::{DeskWorld, WorldConfig};
use biasaudit::deskmodel::{Backend, ToyTransformer, TransformerConfig};
use biasaudit::math;
use biasaudit::metrics::kl_divergence;
use biasaudit::pipeline::RunConfig;
use biasaudit::promptgen::{Direction, TaskKind};

const KINDS: [TaskKind; 2] = [TaskKind::GenderName, TaskKind::GenderProfession];

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn names(per_group: usize) -> NameTable {
    let full = load_names(File::open(crate_dir().join("data/names_400.csv")).unwrap()).unwrap();
    let mut seen: BTreeMap<_, usize> = BTreeMap::new();
    let kept: Vec<_> = full
        .records
        .into_iter()
        .filter(|r| {
            let c = seen.entry((r.race, r.gender)).or_default();
            *c += 1;
            *c <= per_group
        })
        .collect();
    let mut buf = Vec::new();
    write_names(&kept, &mut buf).unwrap();
    load_names(buf.as_slice()).unwrap()
}

fn professions() -> Vec<String> {
    std::fs::read_to_string(crate_dir().join("data/professions.txt"))
        .unwrap()
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

/// Train with the toy config's optimizer settings on a world of the given bias.
fn train(names: &NameTable, bias: f64, seed: u64, mix: CorpusMix, epochs: Option<usize>) -> (DeskWorld, ToyTransformer) {
    let cfg = RunConfig::load(&crate_dir().join("configs/toy_gender.toml")).unwrap();
    let world_cfg = WorldConfig { bias_strength: bias, seed, ..cfg.world };
    let world = DeskWorld::build(names, &professions(), None, &KINDS, world_cfg).unwrap();
    let tasks: Vec<(TaskKind, Direction)> = KINDS.iter().map(|&k| (k, Direction::DemoR)).collect();
    let lines = training_corpus(&world, &tasks, mix, seed).unwrap();
    let train_cfg = TrainConfig { seed, epochs: epochs.unwrap_or(cfg.train.epochs), ..cfg.train };
    let (model, _) = train_toy_transformer(&lines, TransformerConfig::desk(world.vocab.len()), &train_cfg).unwrap();
    (world, model)
}

/// Next-token log-probabilities after `BOS TASK ctx item marker SEP` for
/// held-out occurrences of every item.
fn held_out(world: &DeskWorld, model: &ToyTransformer, kind: TaskKind, items: &[String], batches: u64) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for b in 0..batches {
        for (item, line) in items.iter().zip(world.batch_lines(kind, Direction::DemoR, items, 50_000 + b).unwrap()) {
            let mut tokens = line.tokens;
            tokens.push(SEP);
            out.push((item.clone(), model.last_logprobs(&tokens, None).unwrap()));
        }
    }
    out
}

#[test]
fn learns_deterministic_name_labels() {
    let table = names(8);
    let (world, model) = train(&table, 0.9, 21, CorpusMix::default(), None);
    let items = table.names();
    let preds = held_out(&world, &model, TaskKind::GenderName, &items, 4);
    let correct = preds
        .iter()
        .filter(|(name, lp)| {
            let gold = table.gold(name, Dimension::Gender).unwrap();
            math::argmax(lp) as u32 == world.vocab.label(&gold).unwrap()
        })
        .count();
    let acc = correct as f64 / preds.len() as f64;
    assert!(acc >= 0.95, "held-out first-token accuracy {acc:.3} over {} prompts", preds.len());
}

#[test]
fn unbiased_world_gives_uniform_profession_labels() {
    let table = names(8);
    let (world, model) = train(&table, 0.0, 22, CorpusMix::default(), None);
    let labels = CategorySet::for_dimension(Dimension::Gender).labels;
    // Draws are conditioned on emitting a label, as the parser only counts valid labels.
    let label_tokens: Vec<u32> = labels.iter().map(|l| world.vocab.label(l).unwrap()).collect();
    let profs = professions();
    let batches = 1000u64.div_ceil(profs.len() as u64);
    let preds = held_out(&world, &model, TaskKind::GenderProfession, &profs, batches);
    assert!(preds.len() >= 1000);

    let mut rng = math::rng(23);
    let mut counts = vec![0usize; labels.len()];
    for (_, lp) in &preds {
        let p: Vec<f64> = label_tokens.iter().map(|&t| lp[t as usize].exp()).collect();
        let total: f64 = p.iter().sum();
        let u: f64 = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let slot = p.iter().position(|pi| {
            acc += pi;
            u < acc
        });
        counts[slot.unwrap_or(p.len() - 1)] += 1;
    }
    let n: usize = counts.iter().sum();
    let pooled: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let uniform = vec![1.0 / labels.len() as f64; labels.len()];
    let kl = kl_divergence(&pooled, &uniform).unwrap();
    assert!(kl <= 0.05, "pooled label KL {kl:.4} vs uniform, counts {counts:?}");
}

#[test]
fn same_seed_gives_identical_weights() {
    let table = names(2);
    let mix = CorpusMix { samples_per_item: 3, uncued_repeats: 1 };
    let (_, a) = train(&table, 0.9, 5, mix, Some(1));
    let (_, b) = train(&table, 0.9, 5, mix, Some(1));
    let (_, c) = train(&table, 0.9, 6, mix, Some(1));
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}
