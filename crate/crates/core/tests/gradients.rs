//! Analytic gradients against central finite differences, term by term.

mod common;

use common::{max_relative_error, numeric, sub, Fixture};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ultragcn::graph::{build_item_neighbors, build_user_neighbors};
use ultragcn::model::{
    loss_c, loss_i, loss_i_prime, loss_o, loss_u, regularization, total_loss, ItemTerm, ScoreMode,
};
use ultragcn::training::init_embeddings;
use ultragcn::{BipartiteGraph, EmbeddingModel, Objective, TrainBatch};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn off(mode: ScoreMode) -> Objective {
    Objective {
        lambda: 0.0,
        gamma: 0.0,
        item_term: ItemTerm::UserItem,
        user_weight: 0.0,
        reg: 0.0,
        score_mode: mode,
    }
}

fn check_terms(f: &Fixture, mode: ScoreMode) {
    let base = off(mode);
    let g0 = f.analytic(&base);
    let n = numeric(&f.model, H, |m| loss_o(m, &f.batch, mode));
    assert!(max_relative_error(&g0, &n, FLOOR) < TOL, "L_O");

    let gc = sub(
        &f.analytic(&Objective {
            lambda: 1.0,
            ..base
        }),
        &g0,
    );
    let n = numeric(&f.model, H, |m| loss_c(m, &f.batch, &f.constraint, mode));
    assert!(max_relative_error(&gc, &n, FLOOR) < TOL, "L_C");

    let gi = sub(&f.analytic(&Objective { gamma: 1.0, ..base }), &g0);
    let n = numeric(&f.model, H, |m| loss_i(m, &f.batch, &f.items, mode));
    assert!(max_relative_error(&gi, &n, FLOOR) < TOL, "L_I");

    let prime = Objective {
        gamma: 1.0,
        item_term: ItemTerm::ItemItem,
        ..base
    };
    let gp = sub(&f.analytic(&prime), &g0);
    let n = numeric(&f.model, H, |m| loss_i_prime(m, &f.batch, &f.items, mode));
    assert!(max_relative_error(&gp, &n, FLOOR) < TOL, "L'_I");

    let gu = sub(
        &f.analytic(&Objective {
            user_weight: 1.0,
            ..base
        }),
        &g0,
    );
    let n = numeric(&f.model, H, |m| loss_u(m, &f.batch, &f.users, mode));
    assert!(max_relative_error(&gu, &n, FLOOR) < TOL, "L_U");

    let full = Objective {
        lambda: 0.7,
        gamma: 2.5,
        user_weight: 0.3,
        reg: 1e-2,
        ..base
    };
    let g = f.analytic(&full);
    let ctx = f.ctx();
    let n = numeric(&f.model, H, |m| {
        total_loss(m, &f.batch, &ctx, &full) + regularization(m, &f.batch, &ctx, &full)
    });
    assert!(max_relative_error(&g, &n, FLOOR) < TOL, "total");
}

#[test]
fn dot_mode_terms_match_differences() {
    for seed in 0..8 {
        check_terms(&Fixture::new(seed, 4, 5, 3, 2), ScoreMode::Dot);
    }
}

#[test]
fn cosine_mode_terms_match_differences() {
    for seed in 0..8 {
        check_terms(&Fixture::new(100 + seed, 4, 5, 3, 2), ScoreMode::Cosine);
    }
}

#[test]
fn larger_batches_and_dims() {
    check_terms(&Fixture::new(7, 16, 12, 6, 4), ScoreMode::Dot);
}

#[test]
fn user_term_mirrors_item_term_on_transposed_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // the square graph first, then random ones
    let mut cases: Vec<(usize, usize, Vec<(u32, u32)>)> =
        vec![(2, 2, vec![(0, 0), (0, 1), (1, 0), (1, 1)])];
    for _ in 0..10 {
        use rand::Rng;
        let (nu, ni) = (rng.random_range(2..7), rng.random_range(2..7));
        let mut pairs: Vec<(u32, u32)> = (0..nu as u32).map(|u| (u, u % ni as u32)).collect();
        for u in 0..nu as u32 {
            for i in 0..ni as u32 {
                if rng.random_bool(0.5) {
                    pairs.push((u, i));
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        cases.push((nu, ni, pairs));
    }
    for (nu, ni, pairs) in cases {
        let graph = BipartiteGraph::from_pairs(nu, ni, &pairs);
        let flipped = graph.transposed();
        let model = init_embeddings(nu, ni, 4, 0.5, &mut rng);
        let mirror = EmbeddingModel::from_parts(
            ni,
            nu,
            4,
            model.item_table().to_vec(),
            model.user_table().to_vec(),
        )
        .unwrap();
        let users = build_user_neighbors(&graph, 3).unwrap();
        let items_of_flipped = build_item_neighbors(&flipped, 3).unwrap();
        assert_eq!(users, items_of_flipped);
        let batch = TrainBatch::new(pairs.clone(), vec![], 0);
        let swapped: Vec<(u32, u32)> = pairs.iter().map(|&(u, i)| (i, u)).collect();
        let mirrored_batch = TrainBatch::new(swapped, vec![], 0);
        let lu = loss_u(&model, &batch, &users, ScoreMode::Dot);
        let li = loss_i(&mirror, &mirrored_batch, &items_of_flipped, ScoreMode::Dot);
        assert!((lu - li).abs() <= 1e-12 * lu.abs().max(1.0), "{lu} vs {li}");
    }
}
