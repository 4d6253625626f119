//! Seeded random graphs and masks for property tests and fuzz seeds.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deps::DependencyPartition;
use crate::graph::{BnInit, ConvAttrs, GraphBuilder, GraphModel};
use crate::prune::PruneMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Chain,
    Residual,
    ChainedAdds,
    ConcatResize,
    RandomDag,
}

pub const FAMILIES: [Family; 5] = [
    Family::Chain,
    Family::Residual,
    Family::ChainedAdds,
    Family::ConcatResize,
    Family::RandomDag,
];

fn builder(rng: &mut ChaCha8Rng, name: &str, seed: u64) -> GraphBuilder {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let h = 2 * rng.random_range(3..=5);
    let w = 2 * rng.random_range(3..=5);
    GraphBuilder::new(name, &[n, c, h, w], seed).with_bn_init(BnInit::Random)
}

fn kernel(rng: &mut ChaCha8Rng) -> ConvAttrs {
    if rng.random_bool(0.5) {
        ConvAttrs::square(3, 1, 1)
    } else {
        ConvAttrs::square(1, 1, 0)
    }
}

/// Optional tail decorations that exercise the pinning rules.
fn head(rng: &mut ChaCha8Rng, b: &mut GraphBuilder, x: &str) {
    let classes = rng.random_range(2..=4);
    let logits = b.conv(x, classes, ConvAttrs::square(1, 1, 0), true);
    match rng.random_range(0..4) {
        0 => {
            let s = b.softmax(&logits);
            b.output(&s);
        }
        1 => {
            let a = b.argmax(&logits);
            b.output(&logits);
            b.output(&a);
        }
        _ => b.output(&logits),
    }
}

fn chain(rng: &mut ChaCha8Rng, seed: u64) -> GraphBuilder {
    let mut b = builder(rng, "chain", seed);
    let mut x = b.input();
    for _ in 0..rng.random_range(1..=4) {
        let c = rng.random_range(2..=8);
        let k = kernel(rng);
        x = if rng.random_bool(0.15) {
            // Conv with bias before BN, and a bare conv, are both legal.
            let y = b.conv(&x, c, k, true);
            b.batch_norm(&y)
        } else if rng.random_bool(0.1) {
            b.conv(&x, c, k, false)
        } else {
            b.conv_bn_relu(&x, c, k)
        };
        if rng.random_bool(0.2) {
            x = b.max_pool(&x, 3, 1, 1);
        }
    }
    head(rng, &mut b, &x);
    b
}

fn residual(rng: &mut ChaCha8Rng, seed: u64) -> GraphBuilder {
    let mut b = builder(rng, "residual", seed);
    let c = rng.random_range(2..=6);
    let x0 = b.input();
    let mut x = if rng.random_bool(0.3) && b.channels(&x0) == c {
        x0
    } else {
        b.conv_bn_relu(&x0, c, ConvAttrs::square(3, 1, 1))
    };
    for _ in 0..rng.random_range(1..=3) {
        let y = b.conv_bn_relu(&x, rng.random_range(2..=6), kernel(rng));
        let y = b.conv(&y, c, kernel(rng), false);
        let y = b.batch_norm(&y);
        let s = if rng.random_bool(0.5) { b.add(&y, &x) } else { b.add(&x, &y) };
        x = if rng.random_bool(0.8) { b.relu(&s) } else { s };
        if rng.random_bool(0.1) {
            x = b.batch_norm(&x);
        }
    }
    head(rng, &mut b, &x);
    b
}

fn chained_adds(rng: &mut ChaCha8Rng, seed: u64) -> GraphBuilder {
    let mut b = builder(rng, "chained_adds", seed);
    let c = rng.random_range(2..=6);
    let x = b.input();
    let stem = b.conv_bn_relu(&x, rng.random_range(2..=6), kernel(rng));
    let branch = |b: &mut GraphBuilder, rng: &mut ChaCha8Rng| {
        let y = b.conv(&stem, c, kernel(rng), false);
        b.batch_norm(&y)
    };
    let mut s = branch(&mut b, rng);
    for _ in 0..rng.random_range(2..=3) {
        let t = branch(&mut b, rng);
        s = b.add(&s, &t);
        if rng.random_bool(0.3) {
            s = b.relu(&s);
        }
    }
    let s = b.relu(&s);
    head(rng, &mut b, &s);
    b
}

fn concat_resize(rng: &mut ChaCha8Rng, seed: u64) -> GraphBuilder {
    let mut b = builder(rng, "concat_resize", seed);
    let c = rng.random_range(2..=5);
    let x = b.input();
    let hi = b.conv_bn_relu(&x, c, ConvAttrs::square(3, 1, 1));
    let lo = b.conv_bn_relu(&hi, rng.random_range(2..=6), ConvAttrs::square(3, 2, 1));
    let up = b.conv(&lo, c, ConvAttrs::square(1, 1, 0), false);
    let up = b.batch_norm(&up);
    let up = b.resize(&up, 2.0);
    let fused = b.add(&hi, &up);
    let fused = b.relu(&fused);
    let lo_up = b.resize(&lo, 2.0);
    let cat = if rng.random_bool(0.5) {
        b.concat(&[&fused, &lo_up])
    } else {
        b.concat(&[&lo_up, &fused, &hi])
    };
    let cat = if rng.random_bool(0.3) { b.max_pool(&cat, 2, 2, 0) } else { cat };
    head(rng, &mut b, &cat);
    b
}

fn random_dag(rng: &mut ChaCha8Rng, seed: u64) -> GraphBuilder {
    let mut b = builder(rng, "random_dag", seed);
    let x = b.input();
    let mut pool = vec![x];
    for _ in 0..rng.random_range(3..=7) {
        let src = pool.choose(rng).expect("nonempty").clone();
        let choice = rng.random_range(0..10);
        let t = match choice {
            0..=3 => b.conv_bn_relu(&src, rng.random_range(2..=6), kernel(rng)),
            4..=5 => {
                // Add with a matching tensor, or a fresh branch to match.
                let c = b.channels(&src);
                let mates: Vec<String> = pool.iter().filter(|t| b.channels(t) == c && **t != src).cloned().collect();
                let other = match mates.choose(rng) {
                    Some(m) => m.clone(),
                    None => {
                        let y = b.conv(&src, c, kernel(rng), false);
                        b.batch_norm(&y)
                    }
                };
                b.add(&src, &other)
            }
            6 => {
                let other = pool.choose(rng).expect("nonempty").clone();
                b.concat(&[&src, &other])
            }
            7 => b.max_pool(&src, 3, 1, 1),
            8 => {
                let y = b.resize(&src, 2.0);
                b.conv_bn_relu(&y, rng.random_range(2..=6), ConvAttrs::square(3, 2, 1))
            }
            _ => b.relu(&src),
        };
        pool.push(t);
    }
    // Every leaf feeds the head, so no branch is dead code.
    let consumed = b.consumed_tensors();
    let leaves: Vec<String> = pool.iter().filter(|t| !consumed.contains(t.as_str())).cloned().collect();
    let tail = if leaves.len() > 1 {
        let refs: Vec<&str> = leaves.iter().map(String::as_str).collect();
        b.concat(&refs)
    } else {
        pool.last().expect("nonempty").clone()
    };
    head(rng, &mut b, &tail);
    b
}

/// One random graph of `family`. Every generated graph validates.
pub fn generate(family: Family, seed: u64) -> GraphModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = match family {
        Family::Chain => chain(&mut rng, seed),
        Family::Residual => residual(&mut rng, seed),
        Family::ChainedAdds => chained_adds(&mut rng, seed),
        Family::ConcatResize => concat_resize(&mut rng, seed),
        Family::RandomDag => random_dag(&mut rng, seed),
    };
    b.finish()
        .unwrap_or_else(|e| panic!("generator {family:?} seed {seed} produced an invalid graph: {e}"))
}

/// `n` graphs cycling through all families.
pub fn corpus(n: usize, seed: u64) -> Vec<(Family, GraphModel)> {
    (0..n)
        .map(|i| {
            let f = FAMILIES[i % FAMILIES.len()];
            (f, generate(f, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        })
        .collect()
}

/// A random valid mask: roughly one in five keeps everything, otherwise
/// each prunable group keeps a random nonempty subset.
pub fn random_mask(partition: &DependencyPartition, seed: u64) -> PruneMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_all = rng.random_bool(0.2);
    let mut mask = PruneMask::default();
    for g in partition.prunable() {
        let kept: Vec<usize> = if keep_all {
            (0..g.channels).collect()
        } else {
            let p = rng.random_range(0.2..1.0);
            let mut k: Vec<usize> = (0..g.channels).filter(|_| rng.random_bool(p)).collect();
            if k.is_empty() {
                k.push(rng.random_range(0..g.channels));
            }
            k
        };
        mask.kept.insert(g.id.clone(), kept);
    }
    mask
}
