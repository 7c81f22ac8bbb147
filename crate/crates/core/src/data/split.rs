use super::MultivariateSeries;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Step counts of the chronological train/validation/test partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
}

impl SplitSpec {
    pub fn new(train_len: usize, val_len: usize, test_len: usize) -> Self {
        Self {
            train_len,
            val_len,
            test_len,
        }
    }

    /// 70/10/20 proportions of `total`, with the remainder going to test.
    pub fn proportional(total: usize) -> Self {
        let train_len = total * 7 / 10;
        let val_len = total / 10;
        Self::new(train_len, val_len, total - train_len - val_len)
    }
}

/// Borrowed contiguous step range `[start, end)` of a series.
#[derive(Debug, Clone, Copy)]
pub struct SeriesView<'a> {
    series: &'a MultivariateSeries,
    start: usize,
    end: usize,
}

impl<'a> SeriesView<'a> {
    pub fn whole(series: &'a MultivariateSeries) -> Self {
        Self {
            series,
            start: 0,
            end: series.len(),
        }
    }

    pub fn series(&self) -> &'a MultivariateSeries {
        self.series
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// Channel-major `N×len` copy of view-relative steps `[offset, offset+len)`.
    pub fn block(&self, offset: usize, len: usize) -> Tensor {
        debug_assert!(self.start + offset + len <= self.end);
        self.series.block(self.start + offset, len)
    }

    /// Absolute step indices covered by this view.
    pub fn steps(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: SeriesView<'a>,
    pub val: SeriesView<'a>,
    pub test: SeriesView<'a>,
}

/// Partitions the series chronologically.
///
/// Train covers `[0, train_len)`. Validation and test follow in order, and
/// each non-empty one is extended backwards by `lookback` steps so its first
/// window has a full lookback drawn from the preceding split.
pub fn chronological_split(
    series: &MultivariateSeries,
    spec: SplitSpec,
    lookback: usize,
) -> Result<Splits<'_>> {
    let total = spec.train_len + spec.val_len + spec.test_len;
    if total > series.len() {
        return Err(Error::Data(format!(
            "split {}+{}+{} = {total} exceeds series length {}",
            spec.train_len,
            spec.val_len,
            spec.test_len,
            series.len()
        )));
    }
    let view = |start: usize, end: usize| SeriesView { series, start, end };
    let extended = |begin: usize, len: usize| {
        if len == 0 {
            view(begin, begin)
        } else {
            view(begin.saturating_sub(lookback), begin + len)
        }
    };
    let val_begin = spec.train_len;
    let test_begin = val_begin + spec.val_len;
    Ok(Splits {
        train: view(0, spec.train_len),
        val: extended(val_begin, spec.val_len),
        test: extended(test_begin, spec.test_len),
    })
}

/// The first `floor(fraction × len)` steps of a training view.
///
/// Fails when that prefix cannot hold a single `(lookback, horizon)` window.
pub fn few_shot_subset<'a>(
    train: SeriesView<'a>,
    fraction: f64,
    lookback: usize,
    horizon: usize,
) -> Result<SeriesView<'a>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("few-shot fraction {fraction} outside (0, 1]")));
    }
    let keep = (fraction * train.len() as f64).floor() as usize;
    if keep < lookback + horizon {
        return Err(Error::InsufficientFewShot(format!(
            "{keep} steps ({fraction} of {}) cannot hold one window of {lookback}+{horizon}",
            train.len()
        )));
    }
    Ok(SeriesView {
        series: train.series,
        start: train.start,
        end: train.start + keep,
    })
}
