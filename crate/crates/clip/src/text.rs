//! Causal text transformer.

use ndarray::{s, Array1, Array2};

use crate::ops::{LayerNorm, ResidualBlock};
use crate::weights::WeightStore;
use crate::{ClipError, Real, Result};

#[derive(Debug, Clone)]
pub struct TextTransformer<F> {
    pub token_embedding: Array2<F>,
    pub positional_embedding: Array2<F>,
    pub blocks: Vec<ResidualBlock<F>>,
    pub ln_final: LayerNorm<F>,
    /// `(width, embed_dim)`.
    pub projection: Array2<F>,
}

impl<F: Real> TextTransformer<F> {
    pub fn from_store(store: &WeightStore, head_width: usize) -> Result<Self> {
        let ln_final = store.layer_norm::<F>("ln_final")?;
        let width = ln_final.weight.len();
        let heads = (width / head_width).max(1);
        let layers = store.count_indexed("transformer.resblocks");
        let blocks = (0..layers)
            .map(|i| store.residual_block(&format!("transformer.resblocks.{i}"), heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token_embedding: store.matrix("token_embedding.weight")?,
            positional_embedding: store.matrix("positional_embedding")?,
            blocks,
            ln_final,
            projection: store.matrix("text_projection")?,
        })
    }

    pub fn context_length(&self) -> usize {
        self.positional_embedding.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.ncols()
    }

    /// Unnormalized embedding of one token sequence (without padding).
    ///
    /// The sequence is pooled at its largest id, the end-of-text token for
    /// real vocabularies. Positions after the pooled token cannot influence
    /// it under the causal mask, so they are never computed.
    pub fn encode(&self, ids: &[u32]) -> Result<Array1<F>> {
        if ids.len() > self.context_length() {
            return Err(ClipError::PromptTooLong { tokens: ids.len(), limit: self.context_length() });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.vocab_size()) {
            return Err(ClipError::TokenOutOfRange { id: bad, vocab: self.vocab_size() });
        }
        // first occurrence of the maximum, matching torch.argmax
        let pool =
            ids.iter().enumerate().fold((0usize, 0u32), |(bi, bv), (i, &v)| if v > bv || i == 0 { (i, v) } else { (bi, bv) }).0;
        let used = &ids[..=pool];
        let mut x = Array2::zeros((used.len(), self.positional_embedding.ncols()));
        for (i, &id) in used.iter().enumerate() {
            let row = &self.token_embedding.row(id as usize) + &self.positional_embedding.row(i);
            x.row_mut(i).assign(&row);
        }
        for block in &self.blocks {
            x = block.forward(x.view(), true);
        }
        let (pooled, _) = self.ln_final.forward_row(x.slice(s![pool, ..]));
        Ok(pooled.dot(&self.projection))
    }
}
