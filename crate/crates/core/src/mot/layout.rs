//! Interleaved text/vision sequence layouts, attention masks and branch routing.

use serde::{Deserialize, Serialize};

use super::MotError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Segment {
    Text { len: usize },
    /// `len` patch tokens, optionally followed by one latent token.
    Vision { len: usize, latent: bool },
}

impl Segment {
    /// Positions occupied, latent included.
    pub fn span(&self) -> usize {
        match *self {
            Segment::Text { len } => len,
            Segment::Vision { len, latent } => len + latent as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Text,
    Vision,
}

/// What occupies a position, and the index of that item within its kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// `index`-th text token of the sequence.
    Text { index: usize },
    /// `index`-th patch of the sequence, `segment`-th vision segment.
    Patch { index: usize, segment: usize },
    /// Latent token of the `segment`-th vision segment.
    Latent { segment: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Vision tokens see their whole segment plus every earlier position.
    #[default]
    SegmentBidirectional,
    /// Vision tokens see their own segment only.
    VisionIsolated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentLayout {
    segments: Vec<Segment>,
}

impl SegmentLayout {
    pub fn new(segments: Vec<Segment>, max_len: usize) -> Result<Self, MotError> {
        let layout = Self { segments };
        layout.validate(max_len)?;
        Ok(layout)
    }

    pub fn validate(&self, max_len: usize) -> Result<(), MotError> {
        if self.segments.is_empty() {
            return Err(MotError::InvalidArgument("layout has no segments".into()));
        }
        if let Some(i) = self.segments.iter().position(|s| match *s {
            Segment::Text { len } | Segment::Vision { len, .. } => len == 0,
        }) {
            return Err(MotError::InvalidArgument(format!("segment {i} has zero length")));
        }
        if self.len() > max_len {
            return Err(MotError::InvalidArgument(format!(
                "layout spans {} positions, context cap is {max_len}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::span).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_count(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match *s {
                Segment::Text { len } => len,
                _ => 0,
            })
            .sum()
    }

    pub fn patch_count(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match *s {
                Segment::Vision { len, .. } => len,
                _ => 0,
            })
            .sum()
    }

    pub fn vision_segments(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::Vision { .. })).count()
    }

    /// `(start, end)` position range of every segment.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.segments
            .iter()
            .map(|s| {
                let span = (start, start + s.span());
                start = span.1;
                span
            })
            .collect()
    }

    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::with_capacity(self.len());
        let (mut text, mut patch, mut vseg) = (0, 0, 0);
        for s in &self.segments {
            match *s {
                Segment::Text { len } => {
                    out.extend((text..text + len).map(|index| Slot::Text { index }));
                    text += len;
                }
                Segment::Vision { len, latent } => {
                    out.extend((patch..patch + len).map(|index| Slot::Patch { index, segment: vseg }));
                    patch += len;
                    if latent {
                        out.push(Slot::Latent { segment: vseg });
                    }
                    vseg += 1;
                }
            }
        }
        out
    }
}

/// `mask[q][k]`: may position `q` attend to position `k`.
pub fn build_mask(layout: &SegmentLayout, mode: MaskMode) -> Vec<Vec<bool>> {
    let n = layout.len();
    let mut mask = vec![vec![false; n]; n];
    for (seg, (start, end)) in layout.segments().iter().zip(layout.spans()) {
        for q in start..end {
            match seg {
                Segment::Text { .. } => mask[q][..=q].fill(true),
                Segment::Vision { .. } => {
                    let from = match mode {
                        MaskMode::SegmentBidirectional => 0,
                        MaskMode::VisionIsolated => start,
                    };
                    mask[q][from..end].fill(true);
                }
            }
        }
    }
    mask
}

pub fn route_modality(layout: &SegmentLayout) -> Vec<Branch> {
    layout
        .segments()
        .iter()
        .flat_map(|s| {
            let b = match s {
                Segment::Text { .. } => Branch::Text,
                Segment::Vision { .. } => Branch::Vision,
            };
            std::iter::repeat(b).take(s.span())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(len: usize) -> Segment {
        Segment::Text { len }
    }

    fn v(len: usize, latent: bool) -> Segment {
        Segment::Vision { len, latent }
    }

    #[test]
    fn all_text_is_lower_triangular() {
        let l = SegmentLayout::new(vec![t(3), t(2)], 16).unwrap();
        let m = build_mask(&l, MaskMode::default());
        for (q, row) in m.iter().enumerate() {
            for (k, &seen) in row.iter().enumerate() {
                assert_eq!(seen, k <= q);
            }
        }
    }

    #[test]
    fn single_vision_segment_sees_everything() {
        let l = SegmentLayout::new(vec![v(3, true)], 16).unwrap();
        assert!(build_mask(&l, MaskMode::default()).iter().flatten().all(|&b| b));
    }

    #[test]
    fn interleaved_pattern() {
        let l = SegmentLayout::new(vec![t(2), v(3, false), t(2)], 16).unwrap();
        let m = build_mask(&l, MaskMode::SegmentBidirectional);
        let expect: Vec<Vec<bool>> = (0..7)
            .map(|q| (0..7).map(|k| if (2..5).contains(&q) { k < 5 } else { k <= q }).collect())
            .collect();
        assert_eq!(m, expect);
        let iso = build_mask(&l, MaskMode::VisionIsolated);
        assert!(!iso[3][0] && iso[3][4] && iso[5][3]);
    }

    #[test]
    fn routing_follows_segments() {
        let l = SegmentLayout::new(vec![t(3)], 16).unwrap();
        assert_eq!(route_modality(&l), vec![Branch::Text; 3]);
        let l = SegmentLayout::new(vec![v(2, true)], 16).unwrap();
        assert_eq!(route_modality(&l), vec![Branch::Vision; 3]);
        let l = SegmentLayout::new(vec![t(1), v(1, true), t(1)], 16).unwrap();
        assert_eq!(route_modality(&l), vec![Branch::Text, Branch::Vision, Branch::Vision, Branch::Text]);
    }

    #[test]
    fn slots_and_validation() {
        let l = SegmentLayout::new(vec![v(2, true), t(1), v(1, false)], 16).unwrap();
        assert_eq!(
            l.slots(),
            vec![
                Slot::Patch { index: 0, segment: 0 },
                Slot::Patch { index: 1, segment: 0 },
                Slot::Latent { segment: 0 },
                Slot::Text { index: 0 },
                Slot::Patch { index: 2, segment: 1 },
            ]
        );
        assert!(SegmentLayout::new(vec![t(0)], 16).is_err());
        assert!(SegmentLayout::new(vec![], 16).is_err());
        assert!(SegmentLayout::new(vec![t(10), v(6, true)], 16).is_err());
    }

    #[test]
    fn serde_shape() {
        let l = SegmentLayout::new(vec![t(2), v(3, true)], 16).unwrap();
        let s = serde_json::to_string(&l).unwrap();
        assert_eq!(s, r#"[{"kind":"text","len":2},{"kind":"vision","len":3,"latent":true}]"#);
        assert_eq!(serde_json::from_str::<SegmentLayout>(&s).unwrap(), l);
    }
}
