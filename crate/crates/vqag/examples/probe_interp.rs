// Scratch: inspect interpolation grids on train vs held-out contexts.
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use vqag::corpus::{encode_corpus, EncodeOptions, Vocabulary};
use vqag::model::Model;
use vqag::objective::train;
use vqag::toy;

fn main() {
    let corpus = toy::standard_corpus(2024);
    let vocab = Vocabulary::build(corpus.train.iter(), 50);
    let opts = EncodeOptions { word_len: 8, max_context_len: None };
    let (examples, _) = encode_corpus(&corpus.train, &vocab, opts);
    let (held, _) = encode_corpus(&corpus.held_out, &vocab, opts);
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let mut model = Model::init(toy::toy_model_config(), vocab, &mut rng);
    let c_a: f64 = std::env::var("TOY_CA").ok().and_then(|v| v.parse().ok()).unwrap_or(2.0);
    let c_q: f64 = std::env::var("TOY_CQ").ok().and_then(|v| v.parse().ok()).unwrap_or(2.0);
    let epochs: usize = std::env::var("TOY_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(30);
    let mut tc = toy::toy_train_config(c_a, c_q, epochs);
    tc.dropout = std::env::var("TOY_DROPOUT").ok().and_then(|v| v.parse().ok()).unwrap_or(tc.dropout);
    tc.lr = std::env::var("TOY_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(tc.lr);
    let report = train(&mut model, &tc, &examples, None).unwrap();
    let last = report.epochs.last().unwrap();
    println!("final: kl_z {:.3} kl_y {:.3} recon_a {:.3} recon_q {:.3}", last.kl_z, last.kl_y, last.recon_a, last.recon_q);

    for (label, exs) in [("train", &examples), ("held", &held)] {
        for (a, b) in [(0usize, 1usize), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)] {
            let ex_a = &exs[a];
            let ex_b = &exs[b];
            if ex_a.paragraph_id != ex_b.paragraph_id { continue; }
            let grid = vqag::synthesis::interpolate(&model, ex_a, ex_b, 5).unwrap();
            let mut z_changes = 0; let mut y_changes = 0;
            for yi in 0..5 { for zi in 1..5 {
                if grid[yi][zi].answer_span != grid[yi][zi-1].answer_span { z_changes += 1; } } }
            for zi in 0..5 { for yi in 1..5 {
                if grid[yi][zi].answer_span != grid[yi-1][zi].answer_span { y_changes += 1; } } }
            let mut qy_changes = 0;
            for zi in 0..5 { for yi in 1..5 {
                if grid[yi][zi].question_tokens != grid[yi-1][zi].question_tokens { qy_changes += 1; } } }
            println!("{label} pair ({a},{b}) ctx={}: z_changes={z_changes} y_changes={y_changes} qy_changes={qy_changes}", ex_a.paragraph_id);
            println!("  corner answers: {:?} .. {:?}", grid[0][0].answer_text, grid[4][4].answer_text);
            println!("  row0 answers along z: {:?}", (0..5).map(|zi| grid[0][zi].answer_text.clone()).collect::<Vec<_>>());
            println!("  col0 questions along y: {:?}", (0..5).map(|yi| grid[yi][0].question_tokens.join(" ")).collect::<Vec<_>>());
        }
    }
}
