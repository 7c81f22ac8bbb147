use super::SeriesView;
use crate::autograd::Tensor;
use crate::embedding::NormStats;

/// One forecasting sample: lookback `[start, start+lookback)` followed
/// immediately by target `[start+lookback, start+lookback+horizon)`.
/// Indices are absolute steps of the underlying series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub lookback: usize,
    pub horizon: usize,
}

impl Window {
    pub fn x_range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.lookback
    }

    pub fn y_range(&self) -> std::ops::Range<usize> {
        self.start + self.lookback..self.start + self.lookback + self.horizon
    }
}

#[derive(Debug, Clone, Default)]
pub struct WindowSet {
    pub windows: Vec<Window>,
    /// Set when the view was too short to yield any window.
    pub warning: Option<String>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Slides a `(lookback, horizon)` window over the view with the given stride.
pub fn make_windows(view: SeriesView<'_>, lookback: usize, horizon: usize, stride: usize) -> WindowSet {
    let need = lookback + horizon;
    let stride = stride.max(1);
    if view.len() < need || need == 0 {
        return WindowSet {
            windows: Vec::new(),
            warning: Some(format!(
                "view of {} steps is shorter than one window ({lookback}+{horizon})",
                view.len()
            )),
        };
    }
    let count = (view.len() - need) / stride + 1;
    let windows = (0..count)
        .map(|i| Window {
            start: view.start() + i * stride,
            lookback,
            horizon,
        })
        .collect();
    WindowSet {
        windows,
        warning: None,
    }
}

/// Materialized samples: `x` is `B×N×T_L`, `y` is `B×N×T_P`, and
/// `norm_stats[b]` holds the per-channel lookback statistics of sample `b`.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub norm_stats: Vec<NormStats>,
}

impl WindowBatch {
    pub fn build(view: SeriesView<'_>, windows: &[Window]) -> Self {
        let series = view.series();
        let n = series.channels();
        let (tl, tp) = windows.first().map_or((0, 0), |w| (w.lookback, w.horizon));
        let mut xs = Vec::with_capacity(windows.len() * n * tl);
        let mut ys = Vec::with_capacity(windows.len() * n * tp);
        let mut norm_stats = Vec::with_capacity(windows.len());
        for w in windows {
            let x = series.block(w.start, tl);
            norm_stats.push(NormStats::from_lookback(&x));
            xs.extend_from_slice(x.data());
            ys.extend_from_slice(series.block(w.start + tl, tp).data());
        }
        let b = windows.len();
        Self {
            x: Tensor::new(vec![b, n, tl], xs).expect("x shape"),
            y: Tensor::new(vec![b, n, tp], ys).expect("y shape"),
            norm_stats,
        }
    }

    pub fn len(&self) -> usize {
        self.norm_stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norm_stats.is_empty()
    }

    fn sample(t: &Tensor, b: usize) -> Tensor {
        let (n, l) = (t.shape()[1], t.shape()[2]);
        Tensor::new(vec![n, l], t.data()[b * n * l..(b + 1) * n * l].to_vec()).expect("sample")
    }

    /// Lookback of sample `b` as an `N×T_L` matrix.
    pub fn x_sample(&self, b: usize) -> Tensor {
        Self::sample(&self.x, b)
    }

    /// Target of sample `b` as an `N×T_P` matrix.
    pub fn y_sample(&self, b: usize) -> Tensor {
        Self::sample(&self.y, b)
    }
}
