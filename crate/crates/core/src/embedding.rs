use crate::error::{Error, Result};

/// A flat embedding viewed as `chunks` contiguous segments of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedEmbedding {
    data: Vec<f64>,
    chunks: usize,
}

impl ChunkedEmbedding {
    pub fn new(data: Vec<f64>, chunks: usize) -> Result<Self> {
        if chunks == 0 || data.is_empty() || !data.len().is_multiple_of(chunks) {
            return Err(Error::shape(format!(
                "{} values do not split into {chunks} chunks",
                data.len()
            )));
        }
        Ok(ChunkedEmbedding { data, chunks })
    }

    pub fn from_chunks(chunks: &[&[f64]]) -> Result<Self> {
        let data: Vec<f64> = chunks.iter().flat_map(|c| c.iter().copied()).collect();
        if chunks.iter().any(|c| c.len() != chunks[0].len()) {
            return Err(Error::shape("chunks of unequal length"));
        }
        ChunkedEmbedding::new(data, chunks.len())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks
    }

    pub fn chunk_dim(&self) -> usize {
        self.data.len() / self.chunks
    }

    pub fn chunk(&self, k: usize) -> &[f64] {
        let d = self.chunk_dim();
        &self.data[k * d..(k + 1) * d]
    }

    pub fn chunks(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.chunk_dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn split_then_concat_is_bit_identical(
            k in 1usize..9,
            seed in proptest::collection::vec(-1e6f64..1e6, 1..40),
        ) {
            let d = seed.len();
            let data: Vec<f64> = (0..k * d).map(|i| seed[i % d] * (i as f64 + 0.5)).collect();
            let e = ChunkedEmbedding::new(data.clone(), k).unwrap();
            let parts: Vec<&[f64]> = e.chunks().collect();
            prop_assert_eq!(parts.len(), k);
            let back = ChunkedEmbedding::from_chunks(&parts).unwrap();
            prop_assert_eq!(back.as_slice(), &data[..]);
        }
    }

    #[test]
    fn rejects_uneven_split() {
        assert!(ChunkedEmbedding::new(vec![0.0; 10], 4).is_err());
    }
}
