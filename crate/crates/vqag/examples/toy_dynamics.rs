// Scratch experiment: toy-corpus training dynamics for capacity control.
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use vqag::corpus::{encode_corpus, EncodeOptions, Vocabulary};
use vqag::model::{ContextInput, Model};
use vqag::objective::train;
use vqag::answer_decoder::DecodeMode;
use vqag::question_decoder::GenerationStrategy;
use vqag::latent::{draw_epsilon, reparameterize, LatentKind, SampleSource};
use vqag::toy;

fn envu(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn train_toy(c: f64, epochs: usize) -> (Model, Vec<vqag::TokenizedExample>, Vec<vqag::TokenizedExample>) {
    let corpus = toy::standard_corpus(2024);
    let vocab = Vocabulary::build(corpus.train.iter(), 50);
    let opts = EncodeOptions { word_len: 8, max_context_len: None };
    let (examples, skipped) = encode_corpus(&corpus.train, &vocab, opts);
    let (held, _) = encode_corpus(&corpus.held_out, &vocab, opts);
    assert_eq!(skipped, 0);
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let mut mc = toy::toy_model_config();
    mc.hidden = envu("TOY_HIDDEN", mc.hidden);
    mc.latent = envu("TOY_LATENT", mc.latent);
    let mut model = Model::init(mc, vocab, &mut rng);
    let mut tc = toy::toy_train_config(c, c, epochs);
    tc.batch_size = envu("TOY_BATCH", tc.batch_size);
    tc.hidden = model.cfg.hidden;
    tc.latent_dim = model.cfg.latent;
    let t0 = std::time::Instant::now();
    let report = train(&mut model, &tc, &examples, None).unwrap();
    println!("C={c}: trained {} epochs in {:.1}s", epochs, t0.elapsed().as_secs_f64());
    for e in report.epochs.iter().step_by(3).chain(report.epochs.last()) {
        println!("  epoch {:2}: kl_z {:.3} kl_y {:.3} recon_a {:.3} recon_q {:.3} total {:.3}",
            e.epoch, e.kl_z, e.kl_y, e.recon_a, e.recon_q, e.total);
    }
    (model, examples, held)
}

fn diversity(model: &Model, contexts: &[vqag::ParagraphRecord]) -> (f64, f64, f64) {
    // fraction of inputs with >=2 distinct greedy spans / questions / both over 50 prior draws
    let mut rng = ChaCha20Rng::seed_from_u64(555);
    let (mut div_span, mut div_q, mut div_both) = (0, 0, 0);
    for rec in contexts {
        let input = ContextInput::from_paragraph(rec, &model.vocab, model.cfg.word_len).unwrap();
        let mut spans = std::collections::HashSet::new();
        let mut questions = std::collections::HashSet::new();
        let (prior_z, prior_y) = model.prior_params(&input);
        for _ in 0..50 {
            let z = reparameterize(&prior_z, &draw_epsilon(model.cfg.latent, &mut rng), LatentKind::Z, SampleSource::Prior);
            let y = reparameterize(&prior_y, &draw_epsilon(model.cfg.latent, &mut rng), LatentKind::Y, SampleSource::Prior);
            let (span, q) = model.decode_at(&input, &z.value, &y.value, DecodeMode::Greedy, GenerationStrategy::Greedy, &mut rng);
            spans.insert((span.start, span.end));
            questions.insert(q.join(" "));
        }
        if spans.len() >= 2 { div_span += 1; }
        if questions.len() >= 2 { div_q += 1; }
        if spans.len() >= 2 && questions.len() >= 2 { div_both += 1; }
    }
    let n = contexts.len() as f64;
    (div_span as f64 / n, div_q as f64 / n, div_both as f64 / n)
}

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(30);
    let (m0, _ex0, held) = train_toy(0.0, epochs);
    let (m2, _ex2, _) = train_toy(2.0, epochs);

    let corpus = toy::standard_corpus(2024);
    let (ds0, dq0, db0) = diversity(&m0, &corpus.train);
    let (ds2, dq2, db2) = diversity(&m2, &corpus.train);
    println!("C=0 diversity: spans {:.2} questions {:.2} both {:.2}", ds0, dq0, db0);
    println!("C=2 diversity: spans {:.2} questions {:.2} both {:.2}", ds2, dq2, db2);

    // bound check on held-out with C=0 model
    let mut rng = ChaCha20Rng::seed_from_u64(777);
    let mut elbo_sum = 0.0;
    let mut is_sum = 0.0;
    let mut se2 = 0.0;
    let n = held.len().min(50);
    let t0 = std::time::Instant::now();
    for ex in &held[..n] {
        let e = vqag::likelihood::elbo_estimate(&m0, ex, 8, &mut rng).unwrap();
        let r = vqag::likelihood::is_nll(&m0, ex, 300, &mut rng).unwrap();
        elbo_sum += e;
        is_sum += -r.nll;
        se2 += r.std_err.nll.powi(2);
    }
    let (elbo, is_ll) = (elbo_sum / n as f64, is_sum / n as f64);
    let se = se2.sqrt() / n as f64;
    println!("bound over {n} held-out: ELBO {elbo:.3} vs IS {is_ll:.3} (+2SE {:.3}) in {:.1}s",
        is_ll + 2.0 * se, t0.elapsed().as_secs_f64());
    println!("bound holds: {}", elbo <= is_ll + 2.0 * se);
}
