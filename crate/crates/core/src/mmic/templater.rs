//! Deterministic attribute-to-text face description.
//!
//! Stands in for a multimodal captioner: the corpus carries ground-truth
//! attributes, so the description is a fixed quantization of `shape_params`.
//! Every emitted word is in the default vocabulary.

use crate::synthface::FaceAttributes;

fn bucket(v: f64) -> usize {
    if v < -0.33 {
        0
    } else if v <= 0.33 {
        1
    } else {
        2
    }
}

/// Phrase describing the face encoded by `attrs.shape_params`; a pure
/// function of the shape parameters (pose and background are ignored).
pub fn describe_face(attrs: &FaceAttributes) -> String {
    let p = &attrs.shape_params;
    let face = ["round", "oval", "narrow"][bucket(p[0])];
    let spacing = ["close-set", "", "wide-set"][bucket(p[1])];
    let eye_size = ["small", "medium", "large"][bucket(p[2])];
    let nose = ["small", "medium", "big"][bucket(p[3])];
    let mouth = ["thin", "medium", "wide"][bucket(p[4])];
    let skin = ["light", "medium", "dark"][bucket(p[5])];
    let hair = ["light", "medium", "dark"][bucket(p[6])];

    let eyes = if spacing.is_empty() {
        format!("{eye_size} eyes")
    } else {
        format!("{spacing} {eye_size} eyes")
    };
    let mut out = format!(
        "{face} face, {eyes}, {nose} nose, {mouth} mouth, {skin} skin, {hair} hair"
    );
    if p[7] > 0.0 {
        out.push_str(", with glasses");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmic::vocab::{Vocabulary, UNK};
    use crate::synthface::make_corpus;

    fn attrs(params: [f64; 8]) -> FaceAttributes {
        FaceAttributes {
            identity_id: 0,
            shape_params: params.to_vec(),
            pose_jitter: [0.0, 0.0],
            background_id: 0,
        }
    }

    #[test]
    fn description_is_pure_and_ignores_background_and_pose() {
        let a = attrs([-0.8, 0.9, 0.9, -0.9, 0.9, 0.0, 0.0, -1.0]);
        let mut b = attrs([-0.8, 0.9, 0.9, -0.9, 0.9, 0.0, 0.0, -1.0]);
        b.background_id = 4;
        b.pose_jitter = [1.2, -0.5];
        assert_eq!(describe_face(&a), describe_face(&b));
        assert_eq!(
            describe_face(&a),
            "round face, wide-set large eyes, small nose, wide mouth, medium skin, medium hair"
        );
    }

    #[test]
    fn glasses_flag_appends_the_accessory() {
        let with = attrs([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
        assert!(describe_face(&with).ends_with("with glasses"));
        let without = attrs([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.5]);
        assert!(!describe_face(&without).contains("glasses"));
    }

    #[test]
    fn every_corpus_description_tokenizes_without_unknowns() {
        let vocab = Vocabulary::default();
        let corpus = make_corpus::<f64>(24, 2, 0, 32).unwrap();
        for sample in &corpus {
            let desc = describe_face(&sample.attrs);
            let tokens = vocab.tokenize(&desc);
            assert!(
                tokens.iter().all(|&t| t != UNK),
                "description {desc:?} has unknown tokens"
            );
        }
    }
}
