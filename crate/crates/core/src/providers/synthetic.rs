//! Exchangeable latent-topic language model with an exact Bayesian predictive.
//!
//! Each document is generated by one topic; words are i.i.d. given the topic.
//! The next-token distribution after a history `h` is
//! `p(w | h) = Σ_t post(t | h) · θ̃_t(w)` where `post(t | h) ∝ π_t Π θ̃_t(h_i)`.
//! Because the posterior is computed over the whole visible history, a prefix
//! keeps influencing every target token.
//!
//! Words outside the vocabulary map to an extra unknown symbol whose mass
//! comes only from smoothing; they carry no topic evidence.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::{
    log_prob_moments, whitespace_attribution, GenerationRequest, Provider, ProviderCapabilities, Strategy,
    CONTEXT_SEPARATOR,
};
use crate::error::{Error, Result};
use crate::transforms::SynonymLexicon;
use crate::types::{round_half_away, Dataset, Label, Sample, TokenScores};

const DIST_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTopicModelSpec {
    pub vocab: Vec<String>,
    pub num_topics: usize,
    pub topic_word_dists: Vec<Vec<f64>>,
    pub topic_prior: Vec<f64>,
    pub smoothing: f64,
}

fn check_distribution(name: &str, dist: &[f64], allow_zero: bool) -> Result<()> {
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > DIST_TOL {
        return Err(Error::InvalidParameter(format!("{name} sums to {sum}, not 1")));
    }
    let bad = dist
        .iter()
        .any(|&p| !p.is_finite() || p < 0.0 || (!allow_zero && p == 0.0));
    if bad {
        return Err(Error::InvalidParameter(format!("{name} has invalid entries")));
    }
    Ok(())
}

impl LatentTopicModelSpec {
    pub fn validate(&self) -> Result<()> {
        let w = self.vocab.len();
        if w < 2 {
            return Err(Error::InvalidParameter(
                "vocabulary needs at least 2 words".into(),
            ));
        }
        if self.num_topics < 2 {
            return Err(Error::InvalidParameter("need at least 2 topics".into()));
        }
        if self.topic_word_dists.len() != self.num_topics || self.topic_prior.len() != self.num_topics {
            return Err(Error::InvalidParameter("topic count mismatch".into()));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(Error::InvalidParameter(
                "smoothing must be finite and >= 0".into(),
            ));
        }
        let mut seen = HashMap::new();
        for (i, word) in self.vocab.iter().enumerate() {
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(Error::InvalidParameter(format!("bad vocabulary word {word:?}")));
            }
            if seen.insert(word.as_str(), i).is_some() {
                return Err(Error::InvalidParameter(format!(
                    "duplicate vocabulary word {word:?}"
                )));
            }
        }
        for (t, dist) in self.topic_word_dists.iter().enumerate() {
            if dist.len() != w {
                return Err(Error::InvalidParameter(format!("topic {t} has wrong length")));
            }
            check_distribution(&format!("topic {t}"), dist, self.smoothing > 0.0)?;
        }
        check_distribution("topic prior", &self.topic_prior, false)
    }
}

/// Running posterior over topics, in log space.
#[derive(Clone, Debug)]
struct Posterior {
    log_weights: Vec<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug)]
pub struct TopicMixtureProvider {
    uri: String,
    spec: LatentTopicModelSpec,
    index: HashMap<String, usize>,
    /// `[topic][symbol]`, smoothed and renormalized; the last symbol is unknown.
    log_word: Vec<Vec<f64>>,
    word: Vec<Vec<f64>>,
    log_prior: Vec<f64>,
}

impl TopicMixtureProvider {
    pub fn new(spec: LatentTopicModelSpec) -> Result<Self> {
        spec.validate()?;
        let w = spec.vocab.len();
        let eps = spec.smoothing;
        let norm = 1.0 + (w as f64 + 1.0) * eps;
        let word: Vec<Vec<f64>> = spec
            .topic_word_dists
            .iter()
            .map(|dist| {
                dist.iter()
                    .map(|&p| (p + eps) / norm)
                    .chain(std::iter::once(eps / norm))
                    .collect()
            })
            .collect();
        let log_word = word.iter().map(|d| d.iter().map(|p| p.ln()).collect()).collect();
        let index = spec
            .vocab
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i))
            .collect();
        Ok(TopicMixtureProvider {
            uri: "synth:custom".into(),
            log_prior: spec.topic_prior.iter().map(|p| p.ln()).collect(),
            spec,
            index,
            log_word,
            word,
        })
    }

    pub fn with_uri(mut self, uri: impl Into<String>) -> Self {
        self.uri = uri.into();
        self
    }

    pub fn spec(&self) -> &LatentTopicModelSpec {
        &self.spec
    }

    fn unknown(&self) -> usize {
        self.spec.vocab.len()
    }

    fn symbol(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(self.unknown())
    }

    fn prior(&self) -> Posterior {
        Posterior {
            log_weights: self.log_prior.clone(),
        }
    }

    fn observe(&self, post: &mut Posterior, sym: usize) {
        if sym == self.unknown() {
            return;
        }
        for (lw, lt) in post.log_weights.iter_mut().zip(&self.log_word) {
            *lw += lt[sym];
        }
    }

    fn normalized(&self, post: &Posterior) -> Vec<f64> {
        let z = log_sum_exp(post.log_weights.iter().copied());
        post.log_weights.iter().map(|lw| (lw - z).exp()).collect()
    }

    fn log_predictive(&self, post: &Posterior, sym: usize) -> f64 {
        let z = log_sum_exp(post.log_weights.iter().copied());
        let joint = log_sum_exp(
            post.log_weights
                .iter()
                .zip(&self.log_word)
                .map(|(lw, lt)| lw + lt[sym]),
        );
        joint - z
    }

    fn predictive_vec(&self, post: &Posterior) -> Vec<f64> {
        let weights = self.normalized(post);
        let mut out = vec![0.0; self.unknown() + 1];
        for (wt, dist) in weights.iter().zip(&self.word) {
            for (o, p) in out.iter_mut().zip(dist) {
                *o += wt * p;
            }
        }
        out
    }

    /// Next-symbol distribution after `history`; the last entry is the unknown symbol.
    pub fn predictive(&self, history: &[&str]) -> Vec<f64> {
        let mut post = self.prior();
        for w in history {
            self.observe(&mut post, self.symbol(w));
        }
        self.predictive_vec(&post)
    }

    /// Posterior over topics after `history`.
    pub fn topic_posterior(&self, history: &[&str]) -> Vec<f64> {
        let mut post = self.prior();
        for w in history {
            self.observe(&mut post, self.symbol(w));
        }
        self.normalized(&post)
    }
}

impl Provider for TopicMixtureProvider {
    fn uri(&self) -> &str {
        &self.uri
    }

    fn capabilities(&self) -> ProviderCapabilities {
        ProviderCapabilities {
            token_logprobs: true,
            distribution_stats: true,
            generation: true,
        }
    }

    fn score(&self, text: &str, context: Option<&str>, with_stats: bool) -> Result<TokenScores> {
        let (words, first, spans) = whitespace_attribution(context, CONTEXT_SEPARATOR, text)?;
        let mut post = self.prior();
        for w in &words[..first] {
            self.observe(&mut post, self.symbol(w));
        }
        let n = words.len() - first;
        let mut logprobs = Vec::with_capacity(n);
        let (mut means, mut stds) = (Vec::new(), Vec::new());
        for w in &words[first..] {
            let sym = self.symbol(w);
            if sym == self.unknown() && self.spec.smoothing == 0.0 {
                return Err(Error::OutOfVocabulary(w.clone()));
            }
            if with_stats {
                let (m, s) = log_prob_moments(self.predictive_vec(&post));
                means.push(m);
                stds.push(s);
            }
            logprobs.push(self.log_predictive(&post, sym).min(0.0));
            self.observe(&mut post, sym);
        }
        let ts = TokenScores {
            tokens: words[first..].to_vec(),
            logprobs,
            char_offsets: spans,
            dist_mean: with_stats.then_some(means),
            dist_std: with_stats.then_some(stds),
            context_id: super::context_id(context),
            stats_approximate: false,
            text_digest: None,
        };
        Ok(ts.with_digest(text))
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String> {
        request.validate()?;
        let mut post = self.prior();
        for (s, e) in crate::types::word_spans(&request.prompt) {
            self.observe(&mut post, self.symbol(&request.prompt[s..e]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed.unwrap_or(0));
        let vocab = self.unknown();
        let mut out = Vec::with_capacity(request.max_new_tokens);
        for _ in 0..request.max_new_tokens {
            let probs = self.predictive_vec(&post);
            let words = &probs[..vocab];
            let sym = match request.strategy {
                Strategy::Greedy => {
                    let mut best = 0;
                    for (i, &p) in words.iter().enumerate() {
                        if p > words[best] {
                            best = i;
                        }
                    }
                    best
                }
                Strategy::Sample => {
                    let total: f64 = words.iter().sum();
                    sample_index(words, total, &mut rng)
                }
            };
            out.push(self.spec.vocab[sym].as_str());
            self.observe(&mut post, sym);
        }
        Ok(out.join(" "))
    }
}

fn sample_index<R: Rng>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn dirichlet<R: Rng>(rng: &mut R, dim: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let mut draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let total: f64 = draws.iter().sum();
    draws.iter_mut().for_each(|d| *d /= total);
    draws
}

/// Renormalizes so the entries sum to one to within rounding.
fn renormalize(dist: &mut [f64]) {
    let total: f64 = dist.iter().sum();
    dist.iter_mut().for_each(|d| *d /= total);
}

/// Parameters of the built-in benchmark. The model itself depends only on
/// `seed`, `vocab_size`, `num_topics`, `background_weight`, `concentration`,
/// `spread`, `prior_skew` and `smoothing`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub num_topics: usize,
    /// Prior mass of the member topic under the target model.
    pub prior_skew: f64,
    pub smoothing: f64,
    /// Share of each topic's word distribution that is uniform.
    pub background_weight: f64,
    /// Dirichlet concentration of the topic-specific component.
    pub concentration: f64,
    /// Share of words reshuffled from one non-member topic to the next, so
    /// topics 2.. are variants of topic 1.
    pub spread: f64,
    pub n_member: usize,
    pub n_nonmember: usize,
    pub doc_len: usize,
    pub n_events: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            vocab_size: 200,
            num_topics: 3,
            prior_skew: 0.8,
            smoothing: 1e-6,
            background_weight: 0.85,
            concentration: 0.3,
            spread: 0.5,
            n_member: 300,
            n_nonmember: 300,
            doc_len: 32,
            n_events: 7,
        }
    }
}

const MODEL_STREAM: u64 = 0;
const DOC_STREAM: u64 = 1;
const EVENT_STREAM: u64 = 2;
const LEXICON_STREAM: u64 = 3;

impl SyntheticConfig {
    pub fn with_seed(seed: u64) -> Self {
        SyntheticConfig {
            seed,
            ..Default::default()
        }
    }

    /// Parses `<seed>[?key=value&…]` with keys `vocab`, `topics`, `prior`,
    /// `smoothing`, `background`, `concentration`, `spread`.
    pub fn from_uri_body(body: &str) -> Result<Self> {
        let (seed, query) = match body.split_once('?') {
            Some((s, q)) => (s, Some(q)),
            None => (body, None),
        };
        let bad = |m: String| Error::InvalidParameter(m);
        let mut cfg = SyntheticConfig::with_seed(
            seed.parse()
                .map_err(|_| bad(format!("bad synthetic seed {seed:?}")))?,
        );
        for pair in query
            .into_iter()
            .flat_map(|q| q.split('&'))
            .filter(|p| !p.is_empty())
        {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| bad(format!("bad synthetic option {pair:?}")))?;
            let num = || -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| bad(format!("bad value for {k}: {v:?}")))
            };
            match k {
                "vocab" => cfg.vocab_size = num()? as usize,
                "topics" => cfg.num_topics = num()? as usize,
                "prior" => cfg.prior_skew = num()?,
                "smoothing" => cfg.smoothing = num()?,
                "background" => cfg.background_weight = num()?,
                "concentration" => cfg.concentration = num()?,
                "spread" => cfg.spread = num()?,
                _ => return Err(bad(format!("unknown synthetic option {k:?}"))),
            }
        }
        Ok(cfg)
    }

    /// URI that reopens the model with this config's prior (or `prior` if given).
    pub fn uri(&self, prior: Option<f64>) -> String {
        let d = SyntheticConfig::default();
        let mut opts = Vec::new();
        if self.vocab_size != d.vocab_size {
            opts.push(format!("vocab={}", self.vocab_size));
        }
        if self.num_topics != d.num_topics {
            opts.push(format!("topics={}", self.num_topics));
        }
        let prior = prior.unwrap_or(self.prior_skew);
        if prior != d.prior_skew {
            opts.push(format!("prior={prior}"));
        }
        if self.smoothing != d.smoothing {
            opts.push(format!("smoothing={}", self.smoothing));
        }
        if self.background_weight != d.background_weight {
            opts.push(format!("background={}", self.background_weight));
        }
        if self.concentration != d.concentration {
            opts.push(format!("concentration={}", self.concentration));
        }
        if self.spread != d.spread {
            opts.push(format!("spread={}", self.spread));
        }
        if opts.is_empty() {
            format!("synth:{}", self.seed)
        } else {
            format!("synth:{}?{}", self.seed, opts.join("&"))
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    fn validate_model(&self) -> Result<()> {
        if self.vocab_size < 2 || self.num_topics < 2 {
            return Err(Error::InvalidParameter("need vocab >= 2 and topics >= 2".into()));
        }
        if !(0.0 < self.prior_skew && self.prior_skew < 1.0) {
            return Err(Error::InvalidParameter("prior skew must be in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.background_weight)
            || !(0.0..=1.0).contains(&self.spread)
            || self.concentration <= 0.0
        {
            return Err(Error::InvalidParameter(
                "bad topic construction parameters".into(),
            ));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vec<String> {
        let width = (self.vocab_size - 1).to_string().len().max(3);
        (0..self.vocab_size).map(|i| format!("w{i:0width$}")).collect()
    }

    fn spec_with_prior(&self, prior: Vec<f64>) -> Result<LatentTopicModelSpec> {
        self.validate_model()?;
        let mut rng = self.rng(MODEL_STREAM);
        let w = self.vocab_size;
        let specific = dirichlet(&mut rng, w, self.concentration);
        let lambda = self.background_weight;
        let mut base: Vec<f64> = specific
            .iter()
            .map(|s| lambda / w as f64 + (1.0 - lambda) * s)
            .collect();
        renormalize(&mut base);
        // topic 1 is topic 0 with words swapped in pairs, so the two are
        // mirror images; topics 2.. each reshuffle part of the previous one
        let mut order: Vec<usize> = (0..w).collect();
        order.shuffle(&mut rng);
        let mut swap: Vec<usize> = (0..w).collect();
        for pair in order.chunks_exact(2) {
            swap[pair[0]] = pair[1];
            swap[pair[1]] = pair[0];
        }
        let mut topic_word_dists = vec![base.clone()];
        topic_word_dists.push(swap.iter().map(|&j| base[j]).collect());
        let n_moved = round_half_away(self.spread * w as f64);
        for t in 2..self.num_topics {
            let prev = &topic_word_dists[t - 1];
            let mut moved: Vec<usize> = (0..w).collect();
            moved.shuffle(&mut rng);
            moved.truncate(n_moved);
            let mut targets = moved.clone();
            targets.shuffle(&mut rng);
            let mut next = prev.clone();
            for (&from, &to) in moved.iter().zip(&targets) {
                next[to] = prev[from];
            }
            topic_word_dists.push(next);
        }
        Ok(LatentTopicModelSpec {
            vocab: self.vocabulary(),
            num_topics: self.num_topics,
            topic_word_dists,
            topic_prior: prior,
            smoothing: self.smoothing,
        })
    }

    /// Prior skewed toward topic 0, the member topic.
    pub fn target_spec(&self) -> Result<LatentTopicModelSpec> {
        let rest = (1.0 - self.prior_skew) / (self.num_topics - 1) as f64;
        let mut prior = vec![rest; self.num_topics];
        prior[0] = self.prior_skew;
        self.spec_with_prior(prior)
    }

    pub fn reference_spec(&self) -> Result<LatentTopicModelSpec> {
        self.spec_with_prior(vec![1.0 / self.num_topics as f64; self.num_topics])
    }

    pub fn target_model(&self) -> Result<TopicMixtureProvider> {
        Ok(TopicMixtureProvider::new(self.target_spec()?)?.with_uri(self.uri(None)))
    }

    pub fn reference_model(&self) -> Result<TopicMixtureProvider> {
        let uniform = 1.0 / self.num_topics as f64;
        Ok(TopicMixtureProvider::new(self.reference_spec()?)?.with_uri(self.uri(Some(uniform))))
    }
}

pub struct SyntheticBenchmark {
    pub config: SyntheticConfig,
    pub dataset: Dataset,
    pub target: TopicMixtureProvider,
    pub reference: TopicMixtureProvider,
    /// Synonym lexicon over the synthetic vocabulary, for neighbors and substitution.
    pub lexicon: SynonymLexicon,
    /// Member-topic texts kept out of the dataset, usable as "event" seeds.
    pub events: Vec<String>,
}

fn sample_doc<R: Rng>(rng: &mut R, spec: &LatentTopicModelSpec, topic: usize, len: usize) -> String {
    let dist = &spec.topic_word_dists[topic];
    let words: Vec<&str> = (0..len)
        .map(|_| spec.vocab[sample_index(dist, 1.0, rng)].as_str())
        .collect();
    words.join(" ")
}

/// Builds a labeled corpus where members come from the topic the target
/// model's prior favors, emulating memorization. Non-members are spread over
/// the remaining topics.
pub fn synthetic_benchmark(config: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    if config.vocab_size < 10 {
        return Err(Error::InvalidParameter(
            "synthetic benchmark needs vocab >= 10".into(),
        ));
    }
    if config.doc_len < 4 {
        return Err(Error::InvalidParameter(
            "synthetic benchmark needs doc_len >= 4".into(),
        ));
    }
    let target = config.target_model()?;
    let reference = config.reference_model()?;
    let spec = target.spec().clone();

    let mut rng = config.rng(DOC_STREAM);
    let mut samples = Vec::with_capacity(config.n_member + config.n_nonmember);
    for i in 0..config.n_member {
        let text = sample_doc(&mut rng, &spec, 0, config.doc_len);
        samples.push(Sample::new(format!("m{i:04}"), text, Label::Member)?);
    }
    // non-members cycle through every topic except the member topic
    for i in 0..config.n_nonmember {
        let topic = 1 + i % (config.num_topics - 1);
        let text = sample_doc(&mut rng, &spec, topic, config.doc_len);
        samples.push(Sample::new(format!("n{i:04}"), text, Label::Nonmember)?);
    }
    let mut dataset = Dataset::new(format!("synthetic-{}", config.seed), samples)?;
    dataset.metadata.insert("source".into(), "synthetic".into());
    dataset
        .metadata
        .insert("provider".into(), target.uri().to_string());
    dataset
        .metadata
        .insert("doc_len".into(), config.doc_len.to_string());

    let mut rng = config.rng(EVENT_STREAM);
    let events = (0..config.n_events)
        .map(|_| sample_doc(&mut rng, &spec, 0, config.doc_len))
        .collect();

    let mut rng = config.rng(LEXICON_STREAM);
    let vocab = &spec.vocab;
    let mut entries = std::collections::BTreeMap::new();
    for (i, word) in vocab.iter().enumerate() {
        let mut syns = Vec::new();
        while syns.len() < 2 {
            let j = rng.random_range(0..vocab.len());
            if j != i && !syns.contains(&vocab[j]) {
                syns.push(vocab[j].clone());
            }
        }
        entries.insert(word.clone(), syns);
    }
    let lexicon = SynonymLexicon::new(entries, true)?;

    Ok(SyntheticBenchmark {
        config: config.clone(),
        dataset,
        target,
        reference,
        lexicon,
        events,
    })
}
