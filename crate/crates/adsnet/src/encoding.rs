//! Feature encoding: one embedding table per categorical field plus learned
//! per-field-pair interaction weights.
//!
//! A batch encodes to one row per example: the per-field embeddings
//! concatenated in schema order, followed by one scalar per field pair
//! (i, j), i < j in lexicographic order, equal to
//! `pair_weight[i][j] * <e_i, e_j>`. The pair-weight matrix is stored square;
//! only its upper triangle is read, so only those entries ever receive
//! gradient.

use crate::diffcore::{DiffError, Graph, NodeId, ParamArena, ParamId, Tensor};
use rand::Rng;

/// Which traffic a record came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Internal,
    External,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Internal => "internal",
            Domain::External => "external",
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "internal" => Some(Domain::Internal),
            "external" => Some(Domain::External),
            _ => None,
        }
    }
}

/// One labeled record. `feature_ids` has one id per schema field.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub feature_ids: Vec<usize>,
    pub domain: Domain,
    pub domain_id: u32,
    pub day: u32,
    pub ad_id: u32,
    /// Cumulative purchase amount; 0 means no purchase.
    pub ltv: f64,
}

/// Ordered categorical fields and the shared embedding width.
#[derive(Clone, Debug)]
pub struct FieldSchema {
    fields: Vec<(String, usize)>,
    embedding_dim: usize,
}

impl FieldSchema {
    pub fn new(fields: Vec<(String, usize)>, embedding_dim: usize) -> anyhow::Result<FieldSchema> {
        anyhow::ensure!(!fields.is_empty(), "schema needs at least one field");
        anyhow::ensure!(embedding_dim >= 1, "embedding_dim must be >= 1");
        for (name, vocab) in &fields {
            anyhow::ensure!(*vocab >= 1, "field {name}: vocabulary size must be >= 1");
        }
        for i in 1..fields.len() {
            anyhow::ensure!(
                fields[..i].iter().all(|(n, _)| n != &fields[i].0),
                "duplicate field name {}",
                fields[i].0
            );
        }
        Ok(FieldSchema { fields, embedding_dim })
    }

    /// Fields named f_0..f_{n-1}, the shape the CSV format uses.
    pub fn anonymous(vocab_sizes: &[usize], embedding_dim: usize) -> anyhow::Result<FieldSchema> {
        FieldSchema::new(
            vocab_sizes.iter().enumerate().map(|(i, &v)| (format!("f_{i}"), v)).collect(),
            embedding_dim,
        )
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn vocab_size(&self, field: usize) -> usize {
        self.fields[field].1
    }

    pub fn field_name(&self, field: usize) -> &str {
        &self.fields[field].0
    }

    /// True when every id is within its field's vocabulary.
    pub fn validates(&self, ids: &[usize]) -> bool {
        ids.len() == self.fields.len()
            && ids.iter().zip(&self.fields).all(|(&id, (_, v))| id < *v)
    }
}

/// Per-field embedding tables plus the pair-weight matrix, owned by one
/// network (the two siamese branches each build their own).
pub struct Encoder {
    tables: Vec<ParamId>,
    pair_weights: ParamId,
    num_fields: usize,
    embed_dim: usize,
}

impl Encoder {
    /// Tables initialize uniform in [-1/sqrt(dim), +1/sqrt(dim)]; pair
    /// weights initialize at 1 so interactions start as plain inner products.
    pub fn new(
        arena: &mut ParamArena,
        rng: &mut impl Rng,
        prefix: &str,
        schema: &FieldSchema,
    ) -> Encoder {
        let dim = schema.embedding_dim();
        let bound = 1.0 / (dim as f64).sqrt();
        let tables = (0..schema.num_fields())
            .map(|f| {
                let vocab = schema.vocab_size(f);
                let mut t = Tensor::zeros(vocab, dim);
                for v in t.data_mut() {
                    *v = rng.gen_range(-bound..=bound);
                }
                arena.add_sparse(&format!("{prefix}.emb.{}", schema.field_name(f)), t)
            })
            .collect();
        let f = schema.num_fields();
        let pair_weights =
            arena.add_dense(&format!("{prefix}.pair_w"), Tensor::filled(f, f, 1.0));
        Encoder { tables, pair_weights, num_fields: f, embed_dim: dim }
    }

    pub fn tables(&self) -> &[ParamId] {
        &self.tables
    }

    pub fn pair_weights(&self) -> ParamId {
        self.pair_weights
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.tables.clone();
        ids.push(self.pair_weights);
        ids
    }

    pub fn num_pairs(&self) -> usize {
        self.num_fields * (self.num_fields - 1) / 2
    }

    /// Width of one encoded row: fields * dim + C(fields, 2).
    pub fn output_width(&self) -> usize {
        self.num_fields * self.embed_dim + self.num_pairs()
    }

    /// Per-field embedding lookups; element f is (B x dim) for field f.
    pub fn embed(
        &self,
        g: &mut Graph,
        arena: &ParamArena,
        batch: &[&Example],
    ) -> Result<Vec<NodeId>, DiffError> {
        (0..self.num_fields)
            .map(|f| {
                let ids: Vec<usize> = batch.iter().map(|ex| ex.feature_ids[f]).collect();
                g.lookup(arena, self.tables[f], &ids)
            })
            .collect()
    }

    /// Weighted pairwise interactions: (B x C(F,2)), pair (i, j) with i < j
    /// in lexicographic order. Bilinear in each field's embedding.
    pub fn interactions(
        &self,
        g: &mut Graph,
        arena: &ParamArena,
        fields: &[NodeId],
    ) -> Result<NodeId, DiffError> {
        if fields.len() < 2 {
            return Err(DiffError::Shape {
                op: "interactions",
                detail: format!("need >= 2 fields, got {}", fields.len()),
            });
        }
        let mut dots = Vec::with_capacity(self.num_pairs());
        let mut at = Vec::with_capacity(self.num_pairs());
        for i in 0..fields.len() {
            for j in (i + 1)..fields.len() {
                let prod = g.mul(fields[i], fields[j])?;
                dots.push(g.sum_cols(prod));
                at.push((i, j));
            }
        }
        let dots = g.concat(&dots)?;
        let weights = g.gather(arena, self.pair_weights, &at)?;
        g.mul_row(dots, weights)
    }

    /// Full representation: concat(field embeddings, interactions); shape
    /// (B x output_width). With a single field there are no interactions.
    pub fn encode(
        &self,
        g: &mut Graph,
        arena: &ParamArena,
        batch: &[&Example],
    ) -> Result<NodeId, DiffError> {
        let fields = self.embed(g, arena, batch)?;
        if self.num_fields < 2 {
            return g.concat(&fields);
        }
        let inter = self.interactions(g, arena, &fields)?;
        let mut parts = fields;
        parts.push(inter);
        g.concat(&parts)
    }
}
