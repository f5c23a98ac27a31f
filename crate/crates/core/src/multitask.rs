//! Hard parameter sharing: one encoder, one MLP head per task.
//!
//! Heads are `pooled → tanh(W₁·+b₁) → W₂·+b₂ → softmax`, hidden width equal
//! to the encoder width. Each example is routed to exactly one head, so a
//! task's loss never produces gradient entries for any other head.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::ops::{dropout_mask, softmax_rows};
use crate::encoder::{Mode, TextEncoder, TransformerEncoder};
use crate::error::{Error, Result};
use crate::params::{mat, mat_mut, vec1, vec_mut, ParamTree, TensorRef};
use crate::seed;
use crate::tokenization::Batch;

pub const DEFAULT_HEAD_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Sentence,
    Article,
    Tweet,
    Headline,
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Granularity::Sentence => "sentence",
            Granularity::Article => "article",
            Granularity::Tweet => "tweet",
            Granularity::Headline => "headline",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Ordered class names; the index is the class id.
    pub labels: Vec<String>,
    pub granularity: Granularity,
    /// Positive class for binary tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<String>,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, labels: &[&str], granularity: Granularity, positive: Option<&str>) -> Self {
        TaskSpec {
            name: name.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            granularity,
            positive: positive.map(str::to_string),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::invalid("task name must be non-empty"));
        }
        if self.labels.len() < 2 {
            return Err(Error::invalid(format!("task `{}` needs at least two labels", self.name)));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if self.labels[..i].contains(l) {
                return Err(Error::invalid(format!("task `{}` repeats label `{l}`", self.name)));
            }
        }
        if let Some(p) = &self.positive {
            if !self.labels.contains(p) {
                return Err(Error::invalid(format!("positive class `{p}` is not a label of `{}`", self.name)));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn positive_index(&self) -> Option<usize> {
        self.positive.as_deref().and_then(|p| self.label_index(p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_hidden: Array2<f64>,
    pub b_hidden: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl HeadParams {
    pub fn init(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[seed::hash_str("head")]);
        HeadParams {
            w_hidden: crate::encoder::params_xavier(input_dim, hidden, &mut rng),
            b_hidden: Array1::zeros(hidden),
            w_out: crate::encoder::params_xavier(hidden, classes, &mut rng),
            b_out: Array1::zeros(classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        HeadParams {
            w_hidden: Array2::zeros(self.w_hidden.raw_dim()),
            b_hidden: Array1::zeros(self.b_hidden.len()),
            w_out: Array2::zeros(self.w_out.raw_dim()),
            b_out: Array1::zeros(self.b_out.len()),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.b_out.len()
    }

    fn logits(&self, input: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let hidden = (input.dot(&self.w_hidden) + &self.b_hidden).mapv(f64::tanh);
        let logits = hidden.dot(&self.w_out) + &self.b_out;
        (hidden, logits)
    }
}

impl ParamTree for HeadParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            mat("hidden.weight", &self.w_hidden),
            vec1("hidden.bias", &self.b_hidden),
            mat("out.weight", &self.w_out),
            vec1("out.bias", &self.b_out),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            mat_mut(&mut self.w_hidden),
            vec_mut(&mut self.b_hidden),
            mat_mut(&mut self.w_out),
            vec_mut(&mut self.b_out),
        ]
    }
}

/// Encoder parameters together with one task's head; the unit a single
/// task's loss differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams<P> {
    pub encoder: P,
    pub head: HeadParams,
}

impl<P: ParamTree> ParamTree for TaskParams<P> {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = self.encoder.tensors();
        out.extend(self.head.tensors().into_iter().map(|mut t| {
            t.name = format!("head.{}", t.name);
            t
        }));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }
}

/// Gradients of one task's mean cross-entropy. `encoder` is `None` when the
/// encoder is frozen.
#[derive(Debug, Clone)]
pub struct TaskGradients<P> {
    pub task: String,
    pub loss: f64,
    pub encoder: Option<P>,
    pub head: HeadParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub spec: TaskSpec,
    pub head: HeadParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel<E = TransformerEncoder> {
    encoder: E,
    heads: Vec<TaskHead>,
    head_dropout: f64,
}

/// Mean cross-entropy of `logits` against `labels` and its gradient.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows() as f64;
    let mut probs = logits.clone();
    softmax_rows(&mut probs);
    let mut loss = 0.0;
    for (row, &y) in logits.axis_iter(Axis(0)).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    let mut grad = probs;
    for (mut row, &y) in grad.axis_iter_mut(Axis(0)).zip(labels) {
        row[y] -= 1.0;
    }
    grad /= b;
    (loss / b, grad)
}

impl<E: TextEncoder> MultiTaskModel<E> {
    pub fn new(encoder: E) -> Self {
        MultiTaskModel { encoder, heads: Vec::new(), head_dropout: DEFAULT_HEAD_DROPOUT }
    }

    pub fn with_head_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config("head_dropout", "must lie in [0, 1)"));
        }
        self.head_dropout = rate;
        Ok(self)
    }

    pub fn head_dropout(&self) -> f64 {
        self.head_dropout
    }

    pub fn encoder(&self) -> &E {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut E {
        &mut self.encoder
    }

    /// Registered tasks in registration order.
    pub fn tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.heads.iter().map(|h| &h.spec)
    }

    pub fn task_names(&self) -> Vec<String> {
        self.heads.iter().map(|h| h.spec.name.clone()).collect()
    }

    pub fn has_task(&self, name: &str) -> bool {
        self.heads.iter().any(|h| h.spec.name == name)
    }

    pub fn task_spec(&self, name: &str) -> Result<&TaskSpec> {
        Ok(&self.entry(name)?.spec)
    }

    pub fn head(&self, name: &str) -> Result<&HeadParams> {
        Ok(&self.entry(name)?.head)
    }

    pub fn head_mut(&mut self, name: &str) -> Result<&mut HeadParams> {
        self.heads
            .iter_mut()
            .find(|h| h.spec.name == name)
            .map(|h| &mut h.head)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    fn entry(&self, name: &str) -> Result<&TaskHead> {
        self.heads.iter().find(|h| h.spec.name == name).ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    /// Adds a freshly initialized head; existing parameters are untouched.
    pub fn register_task(&mut self, spec: TaskSpec, seed: u64) -> Result<()> {
        spec.validate()?;
        if self.has_task(&spec.name) {
            return Err(Error::DuplicateTask(spec.name));
        }
        let d = self.encoder.dim();
        let head = HeadParams::init(d, d, spec.num_classes(), seed::derive_seed(seed, &[seed::hash_str(&spec.name)]));
        self.heads.push(TaskHead { spec, head });
        Ok(())
    }

    /// Inserts a head with given parameters (checkpoint loading).
    pub fn insert_head(&mut self, spec: TaskSpec, head: HeadParams) -> Result<()> {
        spec.validate()?;
        if self.has_task(&spec.name) {
            return Err(Error::DuplicateTask(spec.name));
        }
        let d = self.encoder.dim();
        if head.w_hidden.dim() != (d, d)
            || head.b_hidden.len() != d
            || head.w_out.dim() != (d, spec.num_classes())
            || head.b_out.len() != spec.num_classes()
        {
            return Err(Error::Shape(format!("head for `{}` does not match encoder/label shapes", spec.name)));
        }
        self.heads.push(TaskHead { spec, head });
        Ok(())
    }

    /// Drops a head; returns its spec and parameters.
    pub fn remove_task(&mut self, name: &str) -> Result<TaskHead> {
        let pos =
            self.heads.iter().position(|h| h.spec.name == name).ok_or_else(|| Error::UnknownTask(name.to_string()))?;
        Ok(self.heads.remove(pos))
    }

    /// Eval-mode logits for `task`.
    pub fn logits(&self, task: &str, batch: &Batch) -> Result<Array2<f64>> {
        let head = self.head(task)?;
        let pooled = self.encoder.encode_batch(batch)?;
        Ok(head.logits(&pooled).1)
    }

    /// Class probabilities, one row per example; only `task`'s head is used.
    pub fn predict(&self, task: &str, batch: &Batch) -> Result<Array2<f64>> {
        let mut p = self.logits(task, batch)?;
        softmax_rows(&mut p);
        Ok(p)
    }

    /// Argmax class per example.
    pub fn predict_classes(&self, task: &str, batch: &Batch) -> Result<Vec<usize>> {
        Ok(self.predict(task, batch)?.axis_iter(Axis(0)).map(|r| argmax(r.iter().copied())).collect())
    }

    fn check_labels(&self, task: &str, batch: &Batch, labels: &[usize]) -> Result<usize> {
        let classes = self.head(task)?.num_classes();
        if labels.len() != batch.size() {
            return Err(Error::Shape(format!("{} labels for a batch of {}", labels.len(), batch.size())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { task: task.to_string(), label, classes });
        }
        Ok(classes)
    }

    /// Eval-mode mean cross-entropy.
    pub fn task_loss(&self, task: &str, batch: &Batch, labels: &[usize]) -> Result<f64> {
        self.check_labels(task, batch, labels)?;
        let logits = self.logits(task, batch)?;
        Ok(cross_entropy(&logits, labels).0)
    }

    /// Loss and gradients for one task-homogeneous batch.
    ///
    /// `mode` controls dropout in both the encoder and before the head.
    /// With `train_encoder == false` only the head is differentiated.
    pub fn task_step_gradients(
        &self,
        task: &str,
        batch: &Batch,
        labels: &[usize],
        mode: Mode,
        train_encoder: bool,
    ) -> Result<TaskGradients<E::Params>> {
        self.check_labels(task, batch, labels)?;
        let head = self.head(task)?;
        let (pooled, cache) = self.encoder.forward(batch, mode)?;
        let drop = match mode {
            Mode::Train { seed } if self.head_dropout > 0.0 => {
                let mut rng = seed::rng(seed, &[seed::hash_str("head_dropout")]);
                Some(dropout_mask(pooled.dim(), self.head_dropout, &mut rng))
            }
            _ => None,
        };
        let input = match &drop {
            Some(m) => &pooled * m,
            None => pooled,
        };
        let (hidden, logits) = head.logits(&input);
        let (loss, dlogits) = cross_entropy(&logits, labels);

        let dw_out = hidden.t().dot(&dlogits);
        let db_out = dlogits.sum_axis(Axis(0));
        let mut dpre = dlogits.dot(&head.w_out.t());
        ndarray::Zip::from(&mut dpre).and(&hidden).for_each(|g, &z| *g *= 1.0 - z * z);
        let dw_hidden = input.t().dot(&dpre);
        let db_hidden = dpre.sum_axis(Axis(0));
        let head_grads = HeadParams { w_hidden: dw_hidden, b_hidden: db_hidden, w_out: dw_out, b_out: db_out };

        let encoder = if train_encoder {
            let mut dpooled = dpre.dot(&head.w_hidden.t());
            if let Some(m) = &drop {
                dpooled *= m;
            }
            Some(self.encoder.backward(&cache, &dpooled)?)
        } else {
            None
        };
        Ok(TaskGradients { task: task.to_string(), loss, encoder, head: head_grads })
    }

    /// Copies out the encoder and `task`'s head as one tree.
    pub fn task_params(&self, task: &str) -> Result<TaskParams<E::Params>> {
        Ok(TaskParams { encoder: self.encoder.params().clone(), head: self.head(task)?.clone() })
    }

    pub fn set_task_params(&mut self, task: &str, params: TaskParams<E::Params>) -> Result<()> {
        *self.head_mut(task)? = params.head;
        *self.encoder.params_mut() = params.encoder;
        Ok(())
    }
}

pub(crate) fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Pooling};
    use crate::tokenization::{build_vocab, encode_texts, Vocabulary};

    fn setup() -> (MultiTaskModel, Vocabulary) {
        let vocab = build_vocab(&["the cat sat on a mat", "shocking news you will not believe"], 1, 100).unwrap();
        let cfg = EncoderConfig {
            vocab_size: vocab.size(),
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 32,
            max_seq_len: 12,
            dropout_rate: 0.1,
            pooling: Pooling::Cls,
            seed: 3,
        };
        let mut m = MultiTaskModel::new(TransformerEncoder::new(cfg).unwrap());
        m.register_task(TaskSpec::new("rumor", &["true", "false"], Granularity::Tweet, Some("false")), 1).unwrap();
        m.register_task(
            TaskSpec::new("polarity", &["positive", "negative", "neutral"], Granularity::Sentence, None),
            1,
        )
        .unwrap();
        (m, vocab)
    }

    fn batch(v: &Vocabulary) -> Batch {
        encode_texts(&["the cat sat", "shocking news", "you will not believe the mat", ""], v, 12).unwrap()
    }

    #[test]
    fn register_shapes_and_isolation() {
        let cfg = EncoderConfig::desk_scale(50, 1);
        let mut m = MultiTaskModel::new(TransformerEncoder::new(cfg).unwrap());
        let before = m.encoder().params().clone();
        m.register_task(TaskSpec::new("rumor", &["true", "false"], Granularity::Tweet, None), 7).unwrap();
        let h = m.head("rumor").unwrap();
        assert_eq!(h.w_hidden.dim(), (64, 64));
        assert_eq!(h.b_hidden.len(), 64);
        assert_eq!(h.w_out.dim(), (64, 2));
        assert_eq!(h.b_out.len(), 2);
        assert_eq!(m.encoder().params(), &before);

        let rumor = h.clone();
        m.register_task(TaskSpec::new("clickbait", &["no", "yes"], Granularity::Headline, None), 7).unwrap();
        assert_eq!(m.head("rumor").unwrap(), &rumor);
        let dup = m.register_task(TaskSpec::new("rumor", &["a", "b"], Granularity::Tweet, None), 7);
        assert!(matches!(dup, Err(Error::DuplicateTask(_))));
    }

    #[test]
    fn predict_rows_sum_to_one_and_match_logit_argmax() {
        let (m, v) = setup();
        let b = batch(&v);
        for task in ["rumor", "polarity"] {
            let p = m.predict(task, &b).unwrap();
            let l = m.logits(task, &b).unwrap();
            for (pr, lr) in p.rows().into_iter().zip(l.rows()) {
                assert!((pr.sum() - 1.0).abs() < 1e-12);
                assert_eq!(argmax(pr.iter().copied()), argmax(lr.iter().copied()));
            }
        }
    }

    #[test]
    fn zeroed_output_layer_is_uniform() {
        let (mut m, v) = setup();
        let h = m.head_mut("polarity").unwrap();
        h.w_out.fill(0.0);
        h.b_out.fill(0.0);
        let p = m.predict("polarity", &batch(&v)).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn predictions_are_routed() {
        let (mut m, v) = setup();
        let b = batch(&v);
        let before = m.predict("rumor", &b).unwrap();
        m.head_mut("polarity").unwrap().w_out.fill(5.0);
        assert_eq!(m.predict("rumor", &b).unwrap(), before);
        assert!(matches!(m.predict("nope", &b), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn cross_entropy_reference_values() {
        // uniform over two classes
        let (l, _) = cross_entropy(&Array2::zeros((4, 2)), &[0, 1, 1, 0]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        // p(correct) = 0.9 for each of three examples: logit gap ln 9
        let gap = 9f64.ln();
        let logits = ndarray::array![[gap, 0.0], [0.0, gap], [gap, 0.0]];
        let (l, _) = cross_entropy(&logits, &[0, 1, 0]);
        assert!((l - 0.105_360_515_657_826_3).abs() < 1e-12, "{l}");
        // near one-hot
        let (l, _) = cross_entropy(&ndarray::array![[800.0, 0.0]], &[0]);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn label_out_of_range() {
        let (m, v) = setup();
        let err = m.task_loss("rumor", &batch(&v), &[0, 1, 2, 0]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, classes: 2, .. }));
    }

    #[test]
    fn duplicated_batch_gives_same_gradients() {
        let (m, v) = setup();
        let texts = ["the cat sat", "shocking news"];
        let once = encode_texts(&texts, &v, 12).unwrap();
        let twice = encode_texts(&[texts[0], texts[1], texts[0], texts[1]], &v, 12).unwrap();
        let g1 = m.task_step_gradients("rumor", &once, &[0, 1], Mode::Eval, true).unwrap();
        let g2 = m.task_step_gradients("rumor", &twice, &[0, 1, 0, 1], Mode::Eval, true).unwrap();
        assert!((g1.loss - g2.loss).abs() < 1e-14);
        let a = TaskParams { encoder: g1.encoder.unwrap(), head: g1.head };
        let b = TaskParams { encoder: g2.encoder.unwrap(), head: g2.head };
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            for (p, q) in x.data.iter().zip(y.data) {
                assert!((p - q).abs() <= 1e-13 * (1.0 + p.abs()), "{}", x.name);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (m, v) = setup();
        let b = batch(&v);
        let labels = [0, 2, 1, 1];
        let g = m.task_step_gradients("polarity", &b, &labels, Mode::Eval, true).unwrap();
        let analytic = TaskParams { encoder: g.encoder.unwrap(), head: g.head };
        let params = m.task_params("polarity").unwrap();
        let r = crate::encoder::finite_difference_check(
            &params,
            &analytic,
            |p| {
                let mut mm = m.clone();
                mm.set_task_params("polarity", p.clone())?;
                mm.task_loss("polarity", &b, &labels)
            },
            1e-4,
            150,
            5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }
}
