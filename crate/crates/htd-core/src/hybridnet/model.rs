//! Forward evaluation, the training loop, and prediction.

use serde::Serialize;

use super::params::HybridModelParams;
use super::{HybridNetError, ModelConfig, THRESHOLD};
use crate::corpus::{Label, LabeledExample};
use crate::numgrad::{gru_step, GruStepParams, NodeId, NumGradError, Tape, Tensor};
use crate::rng::DetRng;
use crate::textproc::{
    clean, encode, tfidf_transform, tokenize, EncodedSequence, TfIdfModel, Vocabulary,
};

/// TF-IDF weights of one document, keyed by vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatures {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// One example ready for the model: encoded ids, optional aux features,
/// and the 0/1 training target.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub encoded: EncodedSequence,
    pub aux: Option<SparseFeatures>,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub early_stop_patience: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            early_stop_patience: 3,
        }
    }
}

/// Per-epoch training trace. Both sequences have exactly `epochs_run`
/// entries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub epochs_run: usize,
    pub early_stopped: bool,
}

/// Cleans, tokenizes, encodes, and (when the config asks for it) attaches
/// TF-IDF features for one text. `context` names the text in errors.
pub fn prepare_example(
    text: &str,
    target: f64,
    context: &str,
    vocab: &Vocabulary,
    tfidf: Option<&TfIdfModel>,
    config: &ModelConfig,
) -> Result<PreparedExample, HybridNetError> {
    let tokens = tokenize(&clean(text));
    if tokens.is_empty() {
        return Err(HybridNetError::EmptyAfterTokenize {
            context: context.to_string(),
        });
    }
    let encoded = encode(&tokens, vocab, config.seq_len);
    let aux = if config.use_tfidf_aux {
        let model = tfidf.ok_or_else(|| {
            HybridNetError::BadConfig(
                "use_tfidf_aux is set but no TF-IDF model was supplied".to_string(),
            )
        })?;
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (token, weight) in tfidf_transform(model, &tokens) {
            if let Some(id) = vocab.id_of(&token) {
                indices.push(id);
                values.push(weight);
            }
        }
        Some(SparseFeatures { indices, values })
    } else {
        None
    };
    Ok(PreparedExample {
        encoded,
        aux,
        target,
    })
}

/// Prepares a whole labeled set, using each example's source id as error
/// context.
pub fn prepare_examples(
    examples: &[LabeledExample],
    vocab: &Vocabulary,
    tfidf: Option<&TfIdfModel>,
    config: &ModelConfig,
) -> Result<Vec<PreparedExample>, HybridNetError> {
    examples
        .iter()
        .map(|ex| {
            prepare_example(
                &ex.text,
                ex.label.target(),
                &format!("record `{}`", ex.source_id),
                vocab,
                tfidf,
                config,
            )
        })
        .collect()
}

/// Node ids of the registered parameters on one tape, in the same canonical
/// slot order as `HybridModelParams::slots`.
struct TapedParams {
    slot_ids: Vec<NodeId>,
    embedding: NodeId,
    conv: Vec<(NodeId, NodeId)>,
    gru: GruStepParams,
    aux: Option<NodeId>,
    dense_w: NodeId,
    dense_b: NodeId,
    out_w: NodeId,
    out_b: NodeId,
}

impl TapedParams {
    fn register(tape: &mut Tape, params: &HybridModelParams) -> Self {
        let mut slot_ids = Vec::new();
        let reg = |tape: &mut Tape, slot_ids: &mut Vec<NodeId>, t: &Tensor| -> NodeId {
            let id = tape.leaf(t.clone());
            slot_ids.push(id);
            id
        };
        let embedding = reg(tape, &mut slot_ids, &params.embedding);
        let conv: Vec<(NodeId, NodeId)> = params
            .conv_kernels
            .iter()
            .zip(&params.conv_biases)
            .map(|(k, b)| {
                (
                    reg(tape, &mut slot_ids, k),
                    reg(tape, &mut slot_ids, b),
                )
            })
            .collect();
        let g = &params.gru;
        let gru = GruStepParams {
            w_z: reg(tape, &mut slot_ids, &g.w_z),
            u_z: reg(tape, &mut slot_ids, &g.u_z),
            b_z: reg(tape, &mut slot_ids, &g.b_z),
            w_r: reg(tape, &mut slot_ids, &g.w_r),
            u_r: reg(tape, &mut slot_ids, &g.u_r),
            b_r: reg(tape, &mut slot_ids, &g.b_r),
            w_h: reg(tape, &mut slot_ids, &g.w_h),
            u_h: reg(tape, &mut slot_ids, &g.u_h),
            b_h: reg(tape, &mut slot_ids, &g.b_h),
        };
        let aux = params
            .aux_proj
            .as_ref()
            .map(|t| reg(tape, &mut slot_ids, t));
        let dense_w = reg(tape, &mut slot_ids, &params.dense_w);
        let dense_b = reg(tape, &mut slot_ids, &params.dense_b);
        let out_w = reg(tape, &mut slot_ids, &params.out_w);
        let out_b = reg(tape, &mut slot_ids, &params.out_b);
        Self {
            slot_ids,
            embedding,
            conv,
            gru,
            aux,
            dense_w,
            dense_b,
            out_w,
            out_b,
        }
    }
}

/// Builds one example's forward graph and returns the sigmoid output node.
fn forward_example(
    tape: &mut Tape,
    tp: &TapedParams,
    config: &ModelConfig,
    ex: &PreparedExample,
    dropout_mask: Option<&[f64]>,
) -> Result<NodeId, NumGradError> {
    debug_assert_eq!(ex.encoded.ids.len(), config.seq_len);
    assert!(
        ex.encoded.true_length >= 1,
        "forward needs at least one real token"
    );

    let emb = tape.embed(tp.embedding, &ex.encoded.ids)?;

    let mut hybrid: Option<NodeId> = None;
    let join = |tape: &mut Tape, acc: Option<NodeId>, next: NodeId| match acc {
        Some(prev) => tape.concat_last_dim(prev, next),
        None => Ok(next),
    };
    for &(kernels, bias) in &tp.conv {
        let conv = tape.conv1d(emb, kernels, bias)?;
        let act = tape.relu(conv)?;
        let pooled = tape.global_max_pool(act)?;
        hybrid = Some(join(tape, hybrid, pooled)?);
    }

    let mut h = tape.leaf(Tensor::zeros(vec![config.gru_hidden]));
    for t in 0..ex.encoded.true_length {
        let x = tape.slice_row(emb, t)?;
        h = gru_step(tape, x, h, &tp.gru)?;
    }
    hybrid = Some(join(tape, hybrid, h)?);

    if let Some(aux_w) = tp.aux {
        let feats = ex.aux.as_ref().expect("aux features prepared with config");
        let aux_vec = tape.sparse_proj(aux_w, &feats.indices, &feats.values)?;
        hybrid = Some(join(tape, hybrid, aux_vec)?);
    }

    let hybrid = hybrid.expect("at least one branch");
    let pre = tape.matvec(tp.dense_w, hybrid)?;
    let pre = tape.add(pre, tp.dense_b)?;
    let mut hidden = tape.relu(pre)?;
    if let Some(mask) = dropout_mask {
        let m = tape.leaf(Tensor::new(vec![config.dense_hidden], mask.to_vec()));
        hidden = tape.mul(hidden, m)?;
    }
    let out = tape.matvec(tp.out_w, hidden)?;
    let out = tape.add(out, tp.out_b)?;
    tape.sigmoid(out)
}

/// Sigmoid scores for a set of examples, inference mode (no dropout).
pub fn score_examples(
    params: &HybridModelParams,
    config: &ModelConfig,
    examples: &[PreparedExample],
) -> Result<Vec<f64>, HybridNetError> {
    let mut scores = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let mut tape = Tape::new();
        let tp = TapedParams::register(&mut tape, params);
        for ex in chunk {
            let prob = forward_example(&mut tape, &tp, config, ex, None)?;
            scores.push(tape.value(prob).data()[0]);
        }
    }
    Ok(scores)
}

/// Classifies one text: label is AI iff the score reaches the 0.5
/// threshold (ties positive).
pub fn predict(
    params: &HybridModelParams,
    config: &ModelConfig,
    vocab: &Vocabulary,
    tfidf: Option<&TfIdfModel>,
    text: &str,
) -> Result<(Label, f64), HybridNetError> {
    let ex = prepare_example(text, 0.0, "input text", vocab, tfidf, config)?;
    let score = score_examples(params, config, std::slice::from_ref(&ex))?[0];
    let label = if score >= THRESHOLD {
        Label::Ai
    } else {
        Label::Human
    };
    Ok((label, score))
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(lr: f64, slots: usize) -> Self {
        Self {
            lr,
            t: 0,
            m: vec![Vec::new(); slots],
            v: vec![Vec::new(); slots],
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (slot, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if self.m[slot].is_empty() {
                self.m[slot] = vec![0.0; param.len()];
                self.v[slot] = vec![0.0; param.len()];
            }
            let data = param.data_mut();
            for j in 0..data.len() {
                let g = grad.data()[j];
                let m = BETA1 * self.m[slot][j] + (1.0 - BETA1) * g;
                let v = BETA2 * self.v[slot][j] + (1.0 - BETA2) * g * g;
                self.m[slot][j] = m;
                self.v[slot][j] = v;
                data[j] -= self.lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn divergence(e: NumGradError) -> HybridNetError {
    match e {
        NumGradError::NonFinite { .. } => HybridNetError::NonFinite,
        other => HybridNetError::Grad(other),
    }
}

fn dropout_mask(config: &ModelConfig, rng: &mut DetRng) -> Vec<f64> {
    let keep = 1.0 - config.dropout_rate;
    (0..config.dense_hidden)
        .map(|_| {
            if rng.unit_f64() < config.dropout_rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect()
}

/// Minimizes mean binary cross-entropy with Adam over seeded-shuffled
/// batches, early-stopping on validation accuracy, and returns the
/// parameters from the best validation epoch.
///
/// The training stream (batch order, dropout) is derived from
/// `config.seed` but distinct from the initialization stream, so the whole
/// run is reproducible from the one seed.
pub fn train(
    mut params: HybridModelParams,
    config: &ModelConfig,
    train_set: &[PreparedExample],
    val_set: &[PreparedExample],
    hyper: &Hyperparams,
) -> Result<(HybridModelParams, TrainReport), HybridNetError> {
    config.validate()?;
    if train_set.is_empty()
        || val_set.is_empty()
        || !train_set.iter().any(|ex| ex.target == 1.0)
        || !train_set.iter().any(|ex| ex.target == 0.0)
    {
        return Err(HybridNetError::DegenerateTrainingSet);
    }

    let mut rng = DetRng::derive(config.seed, 1);
    let mut adam = Adam::new(hyper.learning_rate, params.slots().len());
    let mut best_params = params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut since_improve = 0usize;
    let mut train_loss = Vec::new();
    let mut val_accuracy = Vec::new();
    let mut early_stopped = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for _ in 0..hyper.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(hyper.batch_size.max(1)) {
            let mut tape = Tape::new();
            let tp = TapedParams::register(&mut tape, &params);
            let mut batch_loss: Option<NodeId> = None;
            for &i in batch {
                let ex = &train_set[i];
                let mask =
                    (config.dropout_rate > 0.0).then(|| dropout_mask(config, &mut rng));
                let prob = forward_example(&mut tape, &tp, config, ex, mask.as_deref())
                    .map_err(divergence)?;
                let loss = tape.bce_loss(prob, ex.target).map_err(divergence)?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => tape.add(acc, loss).map_err(divergence)?,
                    None => loss,
                });
            }
            let total = batch_loss.expect("chunks are never empty");
            let mean = tape
                .scalar_mul(total, 1.0 / batch.len() as f64)
                .map_err(divergence)?;
            let mean_value = tape.value(mean).data()[0];
            if !mean_value.is_finite() {
                return Err(HybridNetError::NonFinite);
            }
            loss_sum += mean_value * batch.len() as f64;

            let grads = tape.backward(mean)?;
            let mut slot_grads: Vec<Tensor> = tp
                .slot_ids
                .iter()
                .map(|&id| grads.dense(&tape, id))
                .collect();
            // PAD's embedding row stays zero: its gradient is masked before
            // the optimizer sees it.
            slot_grads[0].data_mut()[..config.embed_dim].fill(0.0);
            adam.step(&mut params.slots_mut(), &slot_grads);
        }
        train_loss.push(loss_sum / train_set.len() as f64);

        let scores = score_examples(&params, config, val_set)?;
        let correct = scores
            .iter()
            .zip(val_set)
            .filter(|(&s, ex)| (s >= THRESHOLD) == (ex.target == 1.0))
            .count();
        let acc = correct as f64 / val_set.len() as f64;
        val_accuracy.push(acc);

        if acc > best_val {
            best_val = acc;
            best_params = params.clone();
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= hyper.early_stop_patience.max(1) {
                early_stopped = true;
                break;
            }
        }
    }

    let epochs_run = train_loss.len();
    Ok((
        best_params,
        TrainReport {
            train_loss,
            val_accuracy,
            epochs_run,
            early_stopped,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybridnet::init_params;
    use crate::textproc::fit_vocab;

    fn tiny_config(vocab_size: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(vocab_size);
        cfg.embed_dim = 8;
        cfg.seq_len = 8;
        cfg.kernel_widths = vec![2, 3];
        cfg.filters_per_width = 4;
        cfg.gru_hidden = 8;
        cfg.dense_hidden = 8;
        cfg.dropout_rate = 0.1;
        cfg
    }

    fn word(label: Label, i: u64) -> String {
        match label {
            Label::Human => format!("person{i}"),
            Label::Ai => format!("engine{i}"),
        }
    }

    fn synth_examples(n_per_class: usize, seed: u64) -> Vec<LabeledExample> {
        let mut rng = DetRng::new(seed);
        let mut out = Vec::new();
        for i in 0..n_per_class {
            for label in [Label::Human, Label::Ai] {
                let len = 4 + rng.below(4) as usize;
                let words: Vec<String> =
                    (0..len).map(|_| word(label, rng.below(10))).collect();
                out.push(LabeledExample {
                    source_id: format!("s{i}"),
                    text: words.join(" "),
                    label,
                });
            }
        }
        out
    }

    struct Fixture {
        config: ModelConfig,
        vocab: crate::textproc::Vocabulary,
        train: Vec<PreparedExample>,
        val: Vec<PreparedExample>,
    }

    fn fixture(n_per_class: usize) -> Fixture {
        let examples = synth_examples(n_per_class, 77);
        let docs: Vec<Vec<String>> = examples
            .iter()
            .map(|ex| tokenize(&clean(&ex.text)))
            .collect();
        let vocab = fit_vocab(&docs, 1000, 1).unwrap();
        let config = tiny_config(vocab.size());
        let prepared = prepare_examples(&examples, &vocab, None, &config).unwrap();
        let n_val = prepared.len() / 4;
        let val = prepared[..n_val].to_vec();
        let train = prepared[n_val..].to_vec();
        Fixture {
            config,
            vocab,
            train,
            val,
        }
    }

    #[test]
    fn forward_score_is_strictly_inside_unit_interval() {
        let fx = fixture(6);
        let params = init_params(&fx.config).unwrap();
        let scores = score_examples(&params, &fx.config, &fx.train).unwrap();
        for s in scores {
            assert!(s > 0.0 && s < 1.0, "score {s}");
        }
    }

    #[test]
    fn single_token_input_runs_one_gru_step() {
        let fx = fixture(3);
        let params = init_params(&fx.config).unwrap();
        let ex = prepare_example("person1", 0.0, "t", &fx.vocab, None, &fx.config).unwrap();
        assert_eq!(ex.encoded.true_length, 1);
        let s = score_examples(&params, &fx.config, &[ex]).unwrap()[0];
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn tie_score_predicts_ai() {
        let fx = fixture(3);
        let mut params = init_params(&fx.config).unwrap();
        for slot in params.slots_mut() {
            slot.data_mut().fill(0.0);
        }
        // All-zero parameters force the logit to 0 and the score to exactly 0.5.
        let (label, score) = predict(&params, &fx.config, &fx.vocab, None, "person1 engine2").unwrap();
        assert_eq!(score, 0.5);
        assert_eq!(label, Label::Ai);

        params.out_b.data_mut()[0] = -0.01;
        let (label, score) = predict(&params, &fx.config, &fx.vocab, None, "person1").unwrap();
        assert!(score < 0.5);
        assert_eq!(label, Label::Human);
    }

    #[test]
    fn empty_text_fails_to_predict() {
        let fx = fixture(3);
        let params = init_params(&fx.config).unwrap();
        for text in ["", "!!! ..."] {
            match predict(&params, &fx.config, &fx.vocab, None, text) {
                Err(HybridNetError::EmptyAfterTokenize { .. }) => {}
                other => panic!("expected EmptyAfterTokenize, got {other:?}"),
            }
        }
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let fx = fixture(4);
        let params = init_params(&fx.config).unwrap();
        let only_ai: Vec<PreparedExample> = fx
            .train
            .iter()
            .filter(|ex| ex.target == 1.0)
            .cloned()
            .collect();
        match train(params, &fx.config, &only_ai, &fx.val, &Hyperparams::default()) {
            Err(HybridNetError::DegenerateTrainingSet) => {}
            other => panic!("expected DegenerateTrainingSet, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let fx = fixture(4);
        let params = init_params(&fx.config).unwrap();
        let before = params.clone();
        let hyper = Hyperparams {
            epochs: 3,
            learning_rate: 0.0,
            early_stop_patience: 100,
            ..Hyperparams::default()
        };
        let (after, report) = train(params, &fx.config, &fx.train, &fx.val, &hyper).unwrap();
        assert_eq!(before, after);
        assert_eq!(report.val_accuracy.len(), report.epochs_run);
        assert_eq!(report.train_loss.len(), report.epochs_run);
    }

    #[test]
    fn constant_validation_accuracy_triggers_early_stop() {
        let fx = fixture(4);
        let params = init_params(&fx.config).unwrap();
        let hyper = Hyperparams {
            epochs: 10,
            learning_rate: 0.0,
            early_stop_patience: 1,
            ..Hyperparams::default()
        };
        let (_, report) = train(params, &fx.config, &fx.train, &fx.val, &hyper).unwrap();
        assert!(report.early_stopped);
        assert_eq!(report.epochs_run, 2);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let fx = fixture(5);
        let hyper = Hyperparams {
            epochs: 2,
            ..Hyperparams::default()
        };
        let run = || {
            let params = init_params(&fx.config).unwrap();
            train(params, &fx.config, &fx.train, &fx.val, &hyper).unwrap()
        };
        let (params_a, report_a) = run();
        let (params_b, report_b) = run();
        assert_eq!(params_a, params_b);
        assert_eq!(report_a, report_b);
    }

    #[test]
    fn separable_corpus_trains_to_high_accuracy() {
        let fx = fixture(30);
        let params = init_params(&fx.config).unwrap();
        let hyper = Hyperparams {
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.02,
            early_stop_patience: 10,
        };
        let (best, report) = train(params, &fx.config, &fx.train, &fx.val, &hyper).unwrap();
        let final_acc = *report.val_accuracy.iter().last().unwrap();
        let best_acc = report
            .val_accuracy
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        assert!(
            best_acc >= 0.95,
            "best val accuracy {best_acc}, trace {:?}",
            report.val_accuracy
        );
        assert!(
            report.train_loss.last().unwrap() < report.train_loss.first().unwrap(),
            "loss did not drop: {:?}",
            report.train_loss
        );
        let _ = final_acc;

        // Best-epoch params should reproduce the best validation accuracy.
        let scores = score_examples(&best, &fx.config, &fx.val).unwrap();
        let correct = scores
            .iter()
            .zip(&fx.val)
            .filter(|(&s, ex)| (s >= THRESHOLD) == (ex.target == 1.0))
            .count();
        let acc = correct as f64 / fx.val.len() as f64;
        assert!((acc - best_acc).abs() < 1e-12);
    }

    #[test]
    fn one_step_touches_every_branch_or_has_zero_gradient() {
        let fx = fixture(2);
        let params = init_params(&fx.config).unwrap();
        let before = params.clone();
        let hyper = Hyperparams {
            epochs: 1,
            batch_size: 1,
            learning_rate: 1e-3,
            early_stop_patience: 5,
        };
        let one = fx.train[..1].to_vec();
        let two: Vec<PreparedExample> = vec![
            fx.train
                .iter()
                .find(|ex| ex.target == 1.0)
                .unwrap()
                .clone(),
            fx.train
                .iter()
                .find(|ex| ex.target == 0.0)
                .unwrap()
                .clone(),
        ];
        let _ = one;
        let (after, _) = train(params, &fx.config, &two, &fx.val, &hyper).unwrap();

        let changed = |a: &Tensor, b: &Tensor| a.data() != b.data();
        assert!(changed(&before.embedding, &after.embedding), "embedding");
        for (i, (b, a)) in before
            .conv_kernels
            .iter()
            .zip(&after.conv_kernels)
            .enumerate()
        {
            assert!(changed(b, a), "conv width index {i}");
        }
        assert!(changed(&before.gru.w_z, &after.gru.w_z), "gru");
        assert!(changed(&before.dense_w, &after.dense_w), "dense");
        assert!(changed(&before.out_w, &after.out_w), "output");
    }
}
