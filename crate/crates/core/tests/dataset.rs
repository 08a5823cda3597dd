use dfr_core::datagen::{build_dataset, DatasetManifest, FingerImages, GenerationRecipe, Split};
use dfr_core::eval::{mre_ap, GroundTruthMatcher, MatchSample, Matcher, PairedMinutiae};
use dfr_core::field::FieldGeometry;
use dfr_core::pca::PcaDistortionModel;
use dfr_core::synth::{render_impression, DistortionSimulator, FingerPattern};

const SIZE: usize = 128;

fn model() -> PcaDistortionModel {
    let g = FieldGeometry::new(SIZE / 16, SIZE / 16, 16);
    let sim = DistortionSimulator::default();
    let fields: Vec<_> = (0..80).map(|s| sim.simulate(g, 1000 + s)).collect();
    PcaDistortionModel::fit(&fields, 8).unwrap()
}

fn fingers(n: u64, per_finger: usize) -> Vec<FingerImages> {
    (0..n)
        .map(|k| {
            let p = FingerPattern::random(k, SIZE);
            FingerImages {
                finger: format!("finger{k:02}"),
                split: if k < n * 4 / 5 { Split::Train } else { Split::Valid },
                images: (0..per_finger as u64).map(|i| render_impression(&p, SIZE, 31 * k + i)).collect(),
            }
        })
        .collect()
}

#[test]
fn toy_dataset_has_expected_count_and_valid_files() {
    let recipe = GenerationRecipe { images_per_finger: 2, seed: 3, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&fingers(10, 2), &model(), &recipe, dir.path()).unwrap();
    assert_eq!(m.entries.len(), 10 * 2 * 2 * 4 * 5);
    assert_eq!(m.split(Split::Train).count(), 640);
    assert_eq!(m.split(Split::Valid).count(), 160);
    let loaded = DatasetManifest::load(&dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(loaded.entries, m.entries);
    loaded.verify().unwrap();

    // oracle pairing between each distorted sample and its normal source:
    // unrectified residuals are the non-rigid part of the fields
    let matcher = GroundTruthMatcher::default();
    let pairs: Vec<PairedMinutiae> = loaded
        .split(Split::Valid)
        .map(|e| {
            let (d, _) = loaded.load_distorted(e).unwrap();
            let n = loaded.load_normal(e).unwrap();
            let (a, b) = (d.minutiae.unwrap(), n.minutiae.unwrap());
            let r = matcher
                .match_pair(&MatchSample { id: e.id.clone(), minutiae: a.clone() }, &MatchSample { id: "n".into(), minutiae: b.clone() })
                .unwrap();
            PairedMinutiae { distorted: a, normal: b, pairing: r.paired }
        })
        .collect();
    let s = mre_ap(&pairs).unwrap();
    println!("unrectified MRE {:.3} px, AP {:.2} over {} comparisons", s.mre, s.ap, s.used);
    assert!(s.mre > 0.3 && s.mre < 8.0, "unrectified MRE {}", s.mre);
    assert!(s.ap >= 3.0, "AP {}", s.ap);
}
