use striavae::cvae::{train, Cvae, CvaeConfig};
use striavae::evalpipe::{fit_model, metrics, run_cv, CvParams, ModelLabel};
use striavae::explain::{brute_shap_oracle, shap_all};
use striavae::features::{read_latents_csv, write_latents_csv, FeatureTable};
use striavae::manifold::{consensus_mask, decode_grid, montage, tile_means, SliceAxis};
use striavae::phantom::{generate_cohort, read_manifest, write_cohort, CohortParams, Target};
use striavae::volume::{load_volume, preprocess, PreprocessParams, Volume, VolumeFormat};

fn tiny_model(dims: [usize; 3], seed: u64) -> CvaeConfig {
    CvaeConfig {
        latent_dim: 2,
        epochs: 2,
        batch_size: 4,
        input_dims: dims,
        seed,
        channels: [2, 2, 2, 2],
        hidden: 4,
        ..CvaeConfig::default()
    }
}

#[test]
fn cohort_to_attributions() {
    let cohort = generate_cohort(&CohortParams {
        n: 10,
        seed: 3,
        ..CohortParams::default()
    })
    .unwrap();
    let params = PreprocessParams {
        tau_percentile: 99.5,
        ..PreprocessParams::default()
    };
    let volumes: Vec<Volume> = cohort
        .iter()
        .map(|s| preprocess(&s.volume, &s.masks.background, &s.masks.reference, &params).unwrap())
        .collect();
    let dims = volumes[0].dims();

    let (model, log) = train(&tiny_model(dims, 1), &volumes, None).unwrap();
    assert_eq!(log.epochs.len(), 2);
    assert!(log.epochs.iter().all(|e| e.total.is_finite()));

    let refs: Vec<&Volume> = volumes.iter().collect();
    let codes = model.encode_all(&refs, 4).unwrap();
    assert_eq!(codes.len(), 10);
    let ids: Vec<String> = cohort.iter().map(|s| s.id.clone()).collect();
    let dir = tempfile::tempdir().unwrap();
    let latents = dir.path().join("latents.csv");
    write_latents_csv(&latents, &ids, &codes).unwrap();
    let (ids_back, codes_back) = read_latents_csv(&latents).unwrap();
    assert_eq!(ids_back, ids);
    for (a, b) in codes.iter().zip(&codes_back) {
        assert_eq!(a.mu, b.mu);
    }

    let mu: Vec<Vec<f64>> = codes.iter().map(|c| c.mu.clone()).collect();
    let y: Vec<f64> = cohort.iter().map(|s| s.scores.get(Target::UpdrsTotal)).collect();
    let cv = CvParams {
        folds: 5,
        ..CvParams::default()
    };
    let report = run_cv(&ids, &mu, &y, "updrs_total", ModelLabel::XgbKmf, &cv).unwrap();
    assert_eq!(report.predictions.len(), 10);
    assert_eq!(report.folds.iter().map(|f| f.n).sum::<usize>(), 10);
    assert!(report.rmse >= report.mae);

    let fitted = fit_model(ModelLabel::XgbKmf, &mu, &y, &cv).unwrap();
    let design = fitted.design(&mu).unwrap();
    let table = FeatureTable {
        ids: ids.clone(),
        mu: mu.clone(),
        kmf: Some(design.iter().map(|r| r[2..].to_vec()).collect()),
    };
    assert_eq!(table.rows(true).unwrap(), design);
    let attrs = shap_all(&fitted.ensemble, &design).unwrap();
    for (a, row) in attrs.iter().zip(&design) {
        assert!(a.local_accuracy_gap() < 1e-6);
        if row.len() <= 6 {
            let brute = brute_shap_oracle(&fitted.ensemble, row).unwrap();
            for (p, q) in a.phi.iter().zip(&brute.phi) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }
    let m = metrics(&y, &fitted.predict(&mu).unwrap()).unwrap();
    assert!(m.rmse >= m.mae);

    let masks: Vec<_> = cohort.iter().map(|s| &s.masks.striatal).collect();
    let consensus = consensus_mask(&masks).unwrap();
    let grid = decode_grid(&model, 0, 1, 3, [-2.0, 2.0], volumes[0].spacing()).unwrap();
    assert_eq!(grid.len(), 9);
    assert!(grid.iter().all(|v| v.dims() == dims));
    assert_eq!(tile_means(&grid, &consensus).unwrap().len(), 9);
    let a = montage(&grid, 3, SliceAxis::Z, dims[2] / 2).unwrap();
    let b = montage(&grid, 3, SliceAxis::Z, dims[2] / 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn written_cohort_reads_back() {
    let cohort = generate_cohort(&CohortParams {
        n: 3,
        seed: 11,
        ..CohortParams::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_cohort(dir.path(), &cohort, VolumeFormat::Rawf32).unwrap();
    let rows = read_manifest(&manifest).unwrap();
    assert_eq!(rows.len(), 3);
    for (row, s) in rows.iter().zip(&cohort) {
        assert_eq!(row.subject_id, s.id);
        assert!((row.target(Target::UpdrsTotal) - s.scores.total()).abs() < 1e-9);
        let v = load_volume(manifest.parent().unwrap().join(&row.volume), VolumeFormat::Rawf32).unwrap();
        assert_eq!(v, s.volume);
    }
}

#[test]
fn saved_model_decodes_identically() {
    let cfg = tiny_model([16, 16, 16], 9);
    let model = Cvae::<f32>::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), 4).unwrap();
    let (back, epoch) = Cvae::<f32>::load(dir.path()).unwrap();
    assert_eq!(epoch, 4);
    let z = [0.3, -1.2];
    assert_eq!(model.decode(&z, [4.0; 3]).unwrap(), back.decode(&z, [4.0; 3]).unwrap());
}
