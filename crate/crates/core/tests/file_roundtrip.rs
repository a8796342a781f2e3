//! Phantom files written to disk load back through the run config and give
//! the same estimate as the in-memory phantom.

use std::fs;

use ctabs::config::RunConfig;
use ctabs::inference::Nix2Prior;
use ctabs::io::ply::encode_ply;
use ctabs::phantom::{synthesize_phantom, Geometry, GridSpec, NoiseMode, Phantom, PhantomSpec};
use ctabs::pipeline::{estimate_specimen, EstimateConfig};
use ctabs::psf::{fwhm_to_sigma, PsfModel};

fn plate() -> (Phantom, PsfModel) {
    let spec = PhantomSpec {
        geometry: Geometry::Plate {
            alpha_deg: 70.0,
            thickness: 0.4,
            size: 3.0,
        },
        densities: [0.0, 1200.0, 200.0],
        grid: GridSpec {
            spacing: [0.234, 0.234, 1.0],
            dims: None,
            margin: 4.0,
        },
        noise_sd: 20.0,
        noise_mode: NoiseMode::PostBlur,
        super_sampling: 8,
        seed: 11,
        mesh_spacing: 0.25,
    };
    let psf = PsfModel::gaussian(0.3, fwhm_to_sigma(1.0)).unwrap();
    (synthesize_phantom(&spec, &psf).unwrap(), psf)
}

#[test]
fn written_phantom_reloads_through_the_run_config() {
    let (ph, psf) = plate();
    let dir = tempfile::tempdir().unwrap();
    ph.write(dir.path(), "plate").unwrap();
    fs::write(dir.path().join("psf.json"), serde_json::to_string(&psf).unwrap()).unwrap();
    let cfg_path = dir.path().join("run.json");
    fs::write(
        &cfg_path,
        r#"{"volume": "plate.mhd", "mesh": "plate.ply", "psf_model": "psf.json", "output_dir": "out",
            "patches": {"count": 3}, "noise": {"sigma_eps": 20.0}, "master_seed": 4}"#,
    )
    .unwrap();

    let cfg = RunConfig::load(&cfg_path).unwrap();
    cfg.validate().unwrap();
    let volume = cfg.load_volume().unwrap();
    let mesh = cfg.load_mesh().unwrap();
    assert_eq!(volume.dims(), ph.volume.dims());
    for (a, b) in volume.data().iter().zip(ph.volume.data()) {
        // stored as 32-bit floats
        assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
    }
    assert_eq!(mesh.vertex_count(), ph.mesh.vertex_count());
    assert_eq!(mesh.thickness, ph.mesh.thickness);
    assert_eq!(cfg.load_psf().unwrap(), psf);

    let from_disk = estimate_specimen(&volume, &mesh, &psf, &cfg.prior, &cfg.estimate_config(), &|_| {}).unwrap();
    let mut mem_cfg = EstimateConfig::default();
    mem_cfg.patches.count = 3;
    mem_cfg.noise.sigma_eps = Some(20.0);
    mem_cfg.master_seed = 4;
    let in_memory = estimate_specimen(&ph.volume, &ph.mesh, &psf, &Nix2Prior::default(), &mem_cfg, &|_| {}).unwrap();

    let rel = from_disk.specimen_mean / ph.truth.thickness_mm - 1.0;
    assert!(rel.abs() < 0.15, "estimate {} for truth 0.4", from_disk.specimen_mean);
    assert!((from_disk.specimen_mean - in_memory.specimen_mean).abs() < 0.01 * in_memory.specimen_mean);
}

#[test]
fn thickness_mesh_survives_a_ply_round_trip() {
    let (ph, _) = plate();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ply");
    fs::write(&path, encode_ply(&ph.mesh)).unwrap();
    let back = ctabs::io::ply::read_ply(&path).unwrap();
    assert_eq!(encode_ply(&back), encode_ply(&ph.mesh));
}
