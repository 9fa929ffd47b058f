//! Dynamic batching under a total output-frame budget. Records are packed
//! greedily in stream order; a record that would overflow the budget closes
//! the current batch and opens the next.

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::corpus::SampleRecord;
use crate::tokenizer::{encode, PAD};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BatchError {
    #[error("record {index} ({language}: {text:?}) has {frames} frames, over the budget of {budget}")]
    RecordTooLong { index: usize, language: String, text: String, frames: usize, budget: usize },
    #[error("frame budget must be positive")]
    ZeroBudget,
}

#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub records: Vec<&'a SampleRecord>,
    pub total_frames: usize,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn frame_lengths(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.n_frames()).collect()
    }

    pub fn token_lengths(&self) -> Vec<usize> {
        self.records.iter().map(|r| encode(&r.text).len()).collect()
    }

    /// Token IDs padded with `PAD`, plus a mask that is true on padding.
    pub fn padded_tokens(&self) -> (Vec<Vec<u16>>, Vec<Vec<bool>>) {
        let seqs: Vec<Vec<u16>> = self.records.iter().map(|r| encode(&r.text).ids().to_vec()).collect();
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mask = seqs.iter().map(|s| (0..width).map(|i| i >= s.len()).collect()).collect();
        let ids = seqs
            .into_iter()
            .map(|mut s| {
                s.resize(width, PAD);
                s
            })
            .collect();
        (ids, mask)
    }

    /// Frames zero-padded to the longest record, plus a padding mask.
    pub fn padded_frames(&self) -> (Vec<Tensor<f32>>, Vec<Vec<bool>>) {
        let t_max = self.records.iter().map(|r| r.n_frames()).max().unwrap_or(0);
        let mut frames = Vec::with_capacity(self.records.len());
        let mut mask = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let d = r.frames.cols;
            let mut t = Tensor::zeros(t_max, d);
            t.data[..r.frames.len()].copy_from_slice(&r.frames.data);
            frames.push(t);
            mask.push((0..t_max).map(|i| i >= r.n_frames()).collect());
        }
        (frames, mask)
    }
}

/// Incremental packer for an unbounded record stream.
#[derive(Debug)]
pub struct Packer<'a> {
    budget: usize,
    current: Vec<&'a SampleRecord>,
    frames: usize,
    seen: usize,
}

impl<'a> Packer<'a> {
    pub fn new(budget: usize) -> Result<Self, BatchError> {
        if budget == 0 {
            return Err(BatchError::ZeroBudget);
        }
        Ok(Self { budget, current: Vec::new(), frames: 0, seen: 0 })
    }

    /// Adds a record; returns the batch it closed, if any.
    pub fn push(&mut self, r: &'a SampleRecord) -> Result<Option<Batch<'a>>, BatchError> {
        let n = r.n_frames();
        let index = self.seen;
        self.seen += 1;
        if n > self.budget {
            return Err(BatchError::RecordTooLong {
                index,
                language: r.language_id.clone(),
                text: r.text.clone(),
                frames: n,
                budget: self.budget,
            });
        }
        let closed = if self.frames + n > self.budget { self.finish() } else { None };
        self.current.push(r);
        self.frames += n;
        Ok(closed)
    }

    /// Emits the partial batch, if any.
    pub fn finish(&mut self) -> Option<Batch<'a>> {
        if self.current.is_empty() {
            return None;
        }
        let records = std::mem::take(&mut self.current);
        let total_frames = std::mem::replace(&mut self.frames, 0);
        Some(Batch { records, total_frames })
    }
}

pub fn pack<'a>(
    records: impl IntoIterator<Item = &'a SampleRecord>,
    frame_budget: usize,
) -> Result<Vec<Batch<'a>>, BatchError> {
    let mut p = Packer::new(frame_budget)?;
    let mut out = Vec::new();
    for r in records {
        out.extend(p.push(r)?);
    }
    out.extend(p.finish());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn rec(i: usize, frames: usize) -> SampleRecord {
        SampleRecord {
            language_id: "xx".into(),
            speaker_id: "s".into(),
            text: "a".repeat(1 + i % 5),
            frames: Tensor::from_fn(frames, 2, |r, c| (r * 2 + c) as f32),
            phoneme_ref: Vec::new(),
        }
    }

    #[test]
    fn greedy_by_hand() {
        let rs: Vec<_> = (0..3).map(|i| rec(i, 3000)).collect();
        let b = pack(&rs, 8000).unwrap();
        assert_eq!(b.iter().map(Batch::len).collect::<Vec<_>>(), vec![2, 1]);
        assert_eq!(b[0].total_frames, 6000);
    }

    #[test]
    fn singleton_and_overflow() {
        let one = [rec(0, 10)];
        assert_eq!(pack(&one, 10).unwrap().len(), 1);
        let err = pack(&[rec(0, 11)], 10).unwrap_err();
        assert!(matches!(err, BatchError::RecordTooLong { index: 0, frames: 11, budget: 10, .. }));
        assert!(err.to_string().contains("xx"));
        assert_eq!(pack(&one, 0).unwrap_err(), BatchError::ZeroBudget);
        assert!(pack(std::iter::empty(), 5).unwrap().is_empty());
    }

    #[test]
    fn padding_masks_mark_padding_exactly() {
        let rs = [rec(0, 2), rec(3, 5)];
        let b = &pack(&rs, 100).unwrap()[0];
        let (frames, fmask) = b.padded_frames();
        assert_eq!(frames[0].rows, 5);
        assert_eq!(fmask[0], vec![false, false, true, true, true]);
        assert!(frames[0].row(3).iter().all(|&v| v == 0.0));
        assert_eq!(frames[1], rs[1].frames);
        let (ids, tmask) = b.padded_tokens();
        assert_eq!(ids[0].len(), ids[1].len());
        for (row, m) in ids.iter().zip(&tmask) {
            for (id, pad) in row.iter().zip(m) {
                assert_eq!(*pad, *id == PAD);
            }
        }
        assert_eq!(b.token_lengths(), vec![3, 6]);
    }

    proptest! {
        #[test]
        fn budget_maximality_conservation(lens in prop::collection::vec(1usize..60, 0..80), budget in 60usize..200) {
            let rs: Vec<_> = lens.iter().enumerate().map(|(i, &n)| rec(i, n)).collect();
            let batches = pack(&rs, budget).unwrap();
            let flat: Vec<*const SampleRecord> =
                batches.iter().flat_map(|b| b.records.iter().map(|r| *r as *const _)).collect();
            let orig: Vec<*const SampleRecord> = rs.iter().map(|r| r as *const _).collect();
            prop_assert_eq!(flat, orig);
            for (k, b) in batches.iter().enumerate() {
                prop_assert!(!b.is_empty());
                prop_assert!(b.total_frames <= budget);
                prop_assert_eq!(b.total_frames, b.frame_lengths().iter().sum::<usize>());
                if let Some(next) = batches.get(k + 1) {
                    prop_assert!(b.total_frames + next.records[0].n_frames() > budget);
                }
            }
        }
    }
}
