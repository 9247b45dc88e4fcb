use std::fmt;
use std::str::FromStr;

use super::{EmbeddingKind, EmbeddingTable, RetrievalError};
use crate::benchmark::RetrievalTemplate;
use crate::combiner::{dot, normalize, CombinerParams};

/// How a (reference, condition) pair becomes a query vector.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    /// Nearest gallery image to the reference.
    ImageOnly,
    /// Nearest gallery image to the condition text.
    TextOnly,
    /// Nearest gallery image to the renormalized mean of both.
    ImagePlusText,
    Combiner(&'a CombinerParams),
}

/// Scorer selection without parameters, as named on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScorerKind {
    ImageOnly,
    TextOnly,
    ImagePlusText,
    Combiner,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 4] = [
        ScorerKind::ImageOnly,
        ScorerKind::TextOnly,
        ScorerKind::ImagePlusText,
        ScorerKind::Combiner,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::ImageOnly => "image-only",
            ScorerKind::TextOnly => "text-only",
            ScorerKind::ImagePlusText => "image+text",
            ScorerKind::Combiner => "combiner",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            ScorerKind::ImageOnly => "Image Only",
            ScorerKind::TextOnly => "Text Only",
            ScorerKind::ImagePlusText => "Image + Text",
            ScorerKind::Combiner => "Combiner",
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScorerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "image-only" | "image_only" | "image" => Ok(ScorerKind::ImageOnly),
            "text-only" | "text_only" | "text" => Ok(ScorerKind::TextOnly),
            "image+text" | "image-plus-text" | "image_plus_text" => Ok(ScorerKind::ImagePlusText),
            "combiner" => Ok(ScorerKind::Combiner),
            _ => Err(format!(
                "unknown scorer {s:?} (expected image-only, text-only, image+text or combiner)"
            )),
        }
    }
}

impl Scorer<'_> {
    pub fn kind(&self) -> ScorerKind {
        match self {
            Scorer::ImageOnly => ScorerKind::ImageOnly,
            Scorer::TextOnly => ScorerKind::TextOnly,
            Scorer::ImagePlusText => ScorerKind::ImagePlusText,
            Scorer::Combiner(_) => ScorerKind::Combiner,
        }
    }

    /// Unit query vector compared against gallery embeddings.
    pub fn query(&self, x_r: &[f64], e: &[f64]) -> Result<Vec<f64>, RetrievalError> {
        if x_r.len() != e.len() {
            return Err(RetrievalError::DimensionMismatch { expected: x_r.len(), got: e.len() });
        }
        Ok(match self {
            Scorer::ImageOnly => x_r.to_vec(),
            Scorer::TextOnly => e.to_vec(),
            Scorer::ImagePlusText => {
                let mut q: Vec<f64> = x_r.iter().zip(e).map(|(a, b)| (a + b) / 2.0).collect();
                normalize(&mut q);
                q
            }
            Scorer::Combiner(p) => p.forward(x_r, e)?,
        })
    }
}

/// Scores each gallery vector against the query built from `x_r` and `e`.
pub fn score_vectors(
    scorer: &Scorer,
    x_r: &[f64],
    e: &[f64],
    gallery: &[Vec<f64>],
) -> Result<Vec<f64>, RetrievalError> {
    let q = scorer.query(x_r, e)?;
    gallery
        .iter()
        .map(|t| {
            if t.len() != q.len() {
                Err(RetrievalError::DimensionMismatch { expected: q.len(), got: t.len() })
            } else {
                Ok(dot(&q, t))
            }
        })
        .collect()
}

/// Scores in gallery order for one template.
pub fn score_gallery(
    scorer: &Scorer,
    template: &RetrievalTemplate,
    table: &EmbeddingTable,
) -> Result<Vec<f64>, RetrievalError> {
    let x_r = table.vector(EmbeddingKind::Image, template.reference.embedding_key())?;
    let e = table.vector(EmbeddingKind::Text, &template.condition)?;
    let gallery = template
        .gallery
        .iter()
        .map(|g| table.vector(EmbeddingKind::Image, g.embedding_key()))
        .collect::<Result<Vec<_>, _>>()?;
    score_vectors(scorer, &x_r, &e, &gallery)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{TargetSpec, Task};
    use crate::retrieval::stub_embed;

    fn fixture() -> (EmbeddingTable, RetrievalTemplate) {
        let mut t = EmbeddingTable::new(4);
        for id in ["r", "g0", "g1", "g2"] {
            t.insert(EmbeddingKind::Image, id, &stub_embed(id, 4, 0)).unwrap();
        }
        t.insert(EmbeddingKind::Text, "red", &stub_embed("red", 4, 0)).unwrap();
        let tpl = RetrievalTemplate {
            task: Task::FocusObject,
            reference: TargetSpec::image("r"),
            condition: "red".into(),
            gallery: ["g0", "r", "g1"].iter().map(|g| TargetSpec::image(*g)).collect(),
            positive_index: 0,
        };
        (t, tpl)
    }

    #[test]
    fn image_only_self_match_scores_one() {
        let (t, tpl) = fixture();
        let s = score_gallery(&Scorer::ImageOnly, &tpl, &t).unwrap();
        assert_eq!(s.len(), 3);
        assert!((s[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn text_only_ignores_reference() {
        let (mut t, mut tpl) = fixture();
        let before = score_gallery(&Scorer::TextOnly, &tpl, &t).unwrap();
        t.insert(EmbeddingKind::Image, "r2", &stub_embed("other", 4, 9)).unwrap();
        tpl.reference = TargetSpec::image("r2");
        assert_eq!(before, score_gallery(&Scorer::TextOnly, &tpl, &t).unwrap());
    }

    #[test]
    fn image_plus_text_hand_computed() {
        let x = [0.6, 0.8, 0.0];
        let e = [0.0, 0.0, 1.0];
        let t = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.6, 0.8]];
        let s = score_vectors(&Scorer::ImagePlusText, &x, &e, &t).unwrap();
        // (x + e)/2 = (0.3, 0.4, 0.5), norm sqrt(0.5).
        let n = 0.5f64.sqrt();
        assert!((s[0] - 0.3 / n).abs() < 1e-12);
        assert!((s[1] - (0.4 * 0.6 + 0.5 * 0.8) / n).abs() < 1e-12);
    }

    #[test]
    fn missing_embedding() {
        let (t, mut tpl) = fixture();
        tpl.condition = "blue".into();
        assert!(matches!(
            score_gallery(&Scorer::ImageOnly, &tpl, &t),
            Err(RetrievalError::MissingEmbedding { kind: EmbeddingKind::Text, .. })
        ));
    }

    #[test]
    fn scorer_names_parse() {
        for k in ScorerKind::ALL {
            assert_eq!(k.as_str().parse::<ScorerKind>().unwrap(), k);
        }
        assert!("clip".parse::<ScorerKind>().is_err());
    }
}
