//! A one-layer model with hand-set weights whose heads have known roles.
//!
//! Hidden coordinates:
//!
//! | coords        | feature                                             |
//! |---------------|-----------------------------------------------------|
//! | 0             | bias (every token)                                  |
//! | 1             | sink marker                                         |
//! | 2             | key-side topic (needle 1.0, needle neighbours 1.1)  |
//! | 3             | query-side topic (question window, answer steps)    |
//! | 4 .. 4+C      | key-side content                                    |
//! | 4+C .. 4+2C   | query-side content                                  |
//! | 4+2C .. +d    | value payload                                       |
//!
//! Every KV group shares the key layout `[sink, topic, content..]` and
//! reads the payload as its value. Query maps set the head roles:
//!
//! * streaming: bias → sink key; mass piles onto the first tokens.
//! * semantic retrieval: query topic → key topic. Mass covers the needle and
//!   its neighbours, with the argmax on a neighbour (topic 1.1 > 1.0), so the
//!   head scores high on span mass and zero on copy-paste.
//! * copy-paste: query content → key content. Answer step `t` carries the
//!   content of needle token `t mod s` (orthonormal across the span), so the
//!   argmax is exactly the copied token while its mass stays modest.
//!
//! Needle and neighbour payloads are large and share a topic direction;
//! haystack and sink payloads are small, so retrieval heads dominate the
//! output at answer steps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::planted_trace::{HeadLabel, NEIGHBOUR_RADIUS};
use crate::harness::tasks::{DistractorProfile, NeedleTask, TaskFamily};
use crate::heads::AnswerSpan;
use crate::model::{GQAModel, LayerWeights, ModelConfig};
use crate::numerics::{dot, l2_norm, mix_seed, seeded_random_matrix, Matrix};

const BIAS: usize = 0;
const SINK: usize = 1;
const K_TOPIC: usize = 2;
const Q_TOPIC: usize = 3;
const CONTENT: usize = 12;
const K_CONTENT: usize = 4;
const Q_CONTENT: usize = K_CONTENT + CONTENT;
const PAYLOAD: usize = Q_CONTENT + CONTENT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedModelParams {
    pub num_groups: usize,
    pub srh_per_group: usize,
    pub copy_paste_per_group: usize,
    pub streaming_per_group: usize,
    pub head_dim: usize,
    /// Pre-softmax logit scales (after the `1/sqrt(d)` factor) of the three
    /// roles.
    pub streaming_logit: f64,
    pub retrieval_logit: f64,
    pub copy_logit: f64,
    pub min_prompt_len: usize,
    pub max_prompt_len: usize,
    pub span_len: usize,
    pub sink: usize,
    pub window: usize,
    pub answer_steps: usize,
}

impl Default for PlantedModelParams {
    fn default() -> Self {
        Self {
            num_groups: 4,
            srh_per_group: 2,
            copy_paste_per_group: 2,
            streaming_per_group: 2,
            head_dim: 16,
            streaming_logit: 5.5,
            retrieval_logit: 6.0,
            copy_logit: 3.5,
            min_prompt_len: 64,
            max_prompt_len: 160,
            span_len: 4,
            sink: 4,
            window: 8,
            answer_steps: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedModel {
    pub model: GQAModel,
    /// Role of every query head (single layer).
    pub labels: Vec<HeadLabel>,
    pub params: PlantedModelParams,
    /// Unit payload direction shared by needle and neighbour values.
    topic_payload: Vec<f64>,
}

impl PlantedModel {
    pub fn heads_with(&self, label: HeadLabel) -> Vec<(usize, usize)> {
        (0..self.labels.len()).filter(|&h| self.labels[h] == label).map(|h| (0, h)).collect()
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
    let n = l2_norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// `count` orthonormal vectors of length `dim` (Gram-Schmidt on random draws).
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = random_unit(rng, dim);
        for u in &out {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = l2_norm(&v);
        if n > 1e-3 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

pub fn planted_model(params: &PlantedModelParams, seed: u64) -> Result<PlantedModel> {
    let d = params.head_dim;
    if d < 2 + CONTENT || params.span_len == 0 || params.span_len > CONTENT {
        return Err(Error::InvalidArgument(format!(
            "planted model needs head_dim >= {} and 1 <= span_len <= {CONTENT}",
            2 + CONTENT
        )));
    }
    if params.min_prompt_len > params.max_prompt_len
        || params.min_prompt_len < params.sink + params.window + params.span_len + 2 * NEIGHBOUR_RADIUS + 1
    {
        return Err(Error::Infeasible("planted prompt length range is too short".into()));
    }
    let per_group = params.srh_per_group + params.copy_paste_per_group + params.streaming_per_group;
    let q_heads = params.num_groups * per_group;
    let config = ModelConfig::new(1, q_heads, params.num_groups, d, seed)?;
    if config.hidden_dim < PAYLOAD + d {
        return Err(Error::InvalidArgument("too few heads for the planted feature layout".into()));
    }
    let hidden = config.hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xa0));

    let mut labels = Vec::with_capacity(q_heads);
    for _ in 0..params.num_groups {
        let mut group: Vec<HeadLabel> = std::iter::repeat_n(HeadLabel::SemanticRetrieval, params.srh_per_group)
            .chain(std::iter::repeat_n(HeadLabel::CopyPaste, params.copy_paste_per_group))
            .chain(std::iter::repeat_n(HeadLabel::Streaming, params.streaming_per_group))
            .collect();
        group.shuffle(&mut rng);
        labels.extend(group);
    }

    let sqrt_d = (d as f64).sqrt();
    let mut w_q = Matrix::zeros(hidden, q_heads * d);
    for (h, label) in labels.iter().enumerate() {
        let c = h * d;
        match label {
            HeadLabel::Streaming => w_q.set(BIAS, c, params.streaming_logit * sqrt_d),
            HeadLabel::SemanticRetrieval => w_q.set(Q_TOPIC, c + 1, params.retrieval_logit * sqrt_d),
            HeadLabel::CopyPaste => {
                for i in 0..CONTENT {
                    w_q.set(Q_CONTENT + i, c + 2 + i, params.copy_logit * sqrt_d);
                }
            }
            HeadLabel::Diffuse => {}
        }
    }
    let mut w_k = Matrix::zeros(hidden, params.num_groups * d);
    let mut w_v = Matrix::zeros(hidden, params.num_groups * d);
    for g in 0..params.num_groups {
        let c = g * d;
        w_k.set(SINK, c, 1.0);
        w_k.set(K_TOPIC, c + 1, 1.0);
        for i in 0..CONTENT {
            w_k.set(K_CONTENT + i, c + 2 + i, 1.0);
        }
        for i in 0..d {
            w_v.set(PAYLOAD + i, c + i, 1.0);
        }
    }
    let w_o = seeded_random_matrix(q_heads * d, hidden, rng.random(), 1.0 / ((q_heads * d) as f64).sqrt())?;
    let topic_payload = random_unit(&mut rng, d);
    let model = GQAModel::from_weights(config, vec![LayerWeights { w_q, w_k, w_v, w_o }])?;
    Ok(PlantedModel { model, labels, params: params.clone(), topic_payload })
}

/// A needle task for the planted model.
pub fn planted_task(pm: &PlantedModel, seed: u64) -> Result<NeedleTask> {
    let p = &pm.params;
    let d = p.head_dim;
    let hidden = pm.model.config().hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xa1));
    let n = rng.random_range(p.min_prompt_len..=p.max_prompt_len);
    let s = p.span_len;
    let start = rng.random_range(p.sink + NEIGHBOUR_RADIUS..=n - p.window - s - NEIGHBOUR_RADIUS);
    let content = orthonormal(&mut rng, s, CONTENT);

    let mut prompt = Matrix::zeros(n, hidden);
    for i in 0..n {
        let row = prompt.row_mut(i);
        row[BIAS] = 1.0;
        let needle = i >= start && i < start + s;
        let near = i + NEIGHBOUR_RADIUS >= start && i < start + s + NEIGHBOUR_RADIUS;
        if i < p.sink {
            row[SINK] = 1.0;
            let pay = random_unit(&mut rng, d);
            row[PAYLOAD..PAYLOAD + d].iter_mut().zip(&pay).for_each(|(r, v)| *r = 0.5 * v);
            continue;
        }
        if needle {
            row[K_TOPIC] = 1.0;
            row[K_CONTENT..K_CONTENT + CONTENT].copy_from_slice(&content[i - start]);
        } else {
            let c = random_unit(&mut rng, CONTENT);
            row[K_CONTENT..K_CONTENT + CONTENT].iter_mut().zip(&c).for_each(|(r, v)| *r = 0.5 * v);
            if near {
                row[K_TOPIC] = 1.1;
            }
        }
        let pay = random_unit(&mut rng, d);
        if near {
            for (k, r) in row[PAYLOAD..PAYLOAD + d].iter_mut().enumerate() {
                *r = 6.0 * (0.8 * pm.topic_payload[k] + 0.6 * pay[k]);
            }
        } else {
            row[PAYLOAD..PAYLOAD + d].iter_mut().zip(&pay).for_each(|(r, v)| *r = 0.3 * v);
        }
        if i + p.window >= n {
            row[Q_TOPIC] = 1.0;
        }
    }

    let answer_ids: Vec<u32> = (0..s as u32).map(|i| 100 + i).collect();
    let mut token_ids: Vec<u32> = (0..n).map(|_| rng.random_range(1000..50_000)).collect();
    token_ids[start..start + s].copy_from_slice(&answer_ids);
    let mut answers = Matrix::zeros(p.answer_steps, hidden);
    for t in 0..p.answer_steps {
        let row = answers.row_mut(t);
        row[BIAS] = 1.0;
        row[Q_TOPIC] = 1.0;
        row[Q_CONTENT..Q_CONTENT + CONTENT].copy_from_slice(&content[t % s]);
        let pay = random_unit(&mut rng, d);
        row[PAYLOAD..PAYLOAD + d].iter_mut().zip(&pay).for_each(|(r, v)| *r = 0.3 * v);
    }

    Ok(NeedleTask {
        family: TaskFamily::SingleNeedle,
        seed,
        prompt_embeddings: prompt,
        answer_embeddings: answers,
        token_ids,
        generated_ids: (0..p.answer_steps).map(|t| answer_ids[t % s]).collect(),
        needle_span: AnswerSpan::contiguous(start, s, answer_ids)?,
        distractors: DistractorProfile { kind: "none".into(), positions: Vec::new(), similarity: 0.0 },
        sink: p.sink,
        window: p.window,
    })
}
