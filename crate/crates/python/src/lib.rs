//! Python bindings for the `aquaseg` toolkit.
//!
//! Images cross the boundary as nested lists `[channel][row][col]`, label
//! maps as `[row][col]`.

#[pyo3::pymodule]
mod aquaseg_py {
    use std::collections::BTreeMap;
    use std::path::PathBuf;

    use aquaseg::dataio::{synthesize_frame, FrameBundle, ModalitySet, SyntheticSceneParams};
    use aquaseg::geometry::{
        backproject as core_backproject, densify_depth as core_densify, project_points as core_project, CameraModel,
        DepthSample, Extrinsics, LidarPoint, PointCloud, SparseDepth,
    };
    use aquaseg::model::{forward, init_params, load_checkpoint, predict, save_checkpoint, ModelConfig, Params};
    use aquaseg::raster::{Image, LabelMap};
    use aquaseg::sync::{nearest_sample as core_nearest, StreamIndex};
    use aquaseg::training::{
        frame_loss, grad_check, jitter_biases, train_step, LossBreakdown, OptimState, Optimizer, TrainConfig, Variant,
    };
    use aquaseg::{eval, Error};
    use nalgebra::{Matrix3, Vector3};
    use pyo3::exceptions::{PyIOError, PyValueError};
    use pyo3::prelude::*;

    fn err(e: Error) -> PyErr {
        match e {
            Error::Io { .. } => PyIOError::new_err(e.to_string()),
            _ => PyValueError::new_err(e.to_string()),
        }
    }

    fn image_to_lists(img: &Image) -> Vec<Vec<Vec<f64>>> {
        (0..img.channels)
            .map(|c| img.plane(c).chunks(img.width).map(<[f64]>::to_vec).collect())
            .collect()
    }

    fn labels_to_lists(labels: &LabelMap) -> Vec<Vec<u8>> {
        labels.ids.chunks(labels.width).map(<[u8]>::to_vec).collect()
    }

    fn mask_of(text: &str) -> PyResult<ModalitySet> {
        text.parse().map_err(err)
    }

    fn breakdown_dict(b: &LossBreakdown) -> BTreeMap<&'static str, f64> {
        LossBreakdown::FIELDS.iter().copied().zip(b.values()).collect()
    }

    /// Pinhole intrinsics.
    #[pyclass(name = "Camera", from_py_object)]
    #[derive(Clone)]
    struct Camera {
        inner: CameraModel,
    }

    #[pymethods]
    impl Camera {
        #[new]
        fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> PyResult<Self> {
            Ok(Camera {
                inner: CameraModel::new(fx, fy, cx, cy, width, height).map_err(err)?,
            })
        }

        #[getter]
        fn width(&self) -> usize {
            self.inner.width
        }

        #[getter]
        fn height(&self) -> usize {
            self.inner.height
        }

        /// Pixel coordinates of a camera-frame point, or None behind the camera.
        fn project(&self, x: f64, y: f64, z: f64) -> Option<(f64, f64)> {
            self.inner.project(&Vector3::new(x, y, z))
        }

        fn backproject(&self, u: f64, v: f64, depth: f64) -> PyResult<(f64, f64, f64)> {
            let p = core_backproject(u, v, depth, &self.inner).map_err(err)?;
            Ok((p.x, p.y, p.z))
        }

        fn __repr__(&self) -> String {
            let c = &self.inner;
            format!("Camera(fx={}, fy={}, cx={}, cy={}, width={}, height={})", c.fx, c.fy, c.cx, c.cy, c.width, c.height)
        }
    }

    fn extrinsics(rotation: Option<Vec<f64>>, translation: Option<Vec<f64>>) -> PyResult<Extrinsics> {
        let r = match rotation {
            None => Matrix3::identity(),
            Some(v) if v.len() == 9 => Matrix3::from_row_slice(&v),
            Some(_) => return Err(PyValueError::new_err("rotation needs 9 row-major values")),
        };
        let t = match translation {
            None => Vector3::zeros(),
            Some(v) if v.len() == 3 => Vector3::new(v[0], v[1], v[2]),
            Some(_) => return Err(PyValueError::new_err("translation needs 3 values")),
        };
        Extrinsics::new(r, t).map_err(err)
    }

    /// Project `(x, y, z)` LIDAR points into the camera; returns `(u, v, depth)`
    /// for every in-frame point with positive depth.
    #[pyfunction]
    #[pyo3(signature = (points, camera, rotation=None, translation=None))]
    fn project_points(
        points: Vec<(f64, f64, f64)>,
        camera: &Camera,
        rotation: Option<Vec<f64>>,
        translation: Option<Vec<f64>>,
    ) -> PyResult<Vec<(f64, f64, f64)>> {
        let ext = extrinsics(rotation, translation)?;
        let cloud = PointCloud {
            points: points
                .into_iter()
                .map(|(x, y, z)| LidarPoint { x, y, z, reflectivity: 1.0 })
                .collect(),
        };
        let sparse = core_project(&cloud, &ext, &camera.inner);
        Ok(sparse.samples.iter().map(|s| (s.u, s.v, s.d)).collect())
    }

    /// Dense depth `[row][col]` interpolated from `(u, v, depth)` samples.
    #[pyfunction]
    #[pyo3(signature = (samples, camera, max_controls=2000))]
    fn densify_depth(samples: Vec<(f64, f64, f64)>, camera: &Camera, max_controls: usize) -> PyResult<Vec<Vec<f64>>> {
        let sparse = SparseDepth {
            width: camera.inner.width,
            height: camera.inner.height,
            samples: samples.into_iter().map(|(u, v, d)| DepthSample { u, v, d }).collect(),
        };
        let dense = core_densify(&sparse, &camera.inner, max_controls).map_err(err)?;
        Ok(dense.depth.chunks(dense.width).map(<[f64]>::to_vec).collect())
    }

    /// Index of the sample nearest to `t` and its offset `sample - t`.
    #[pyfunction]
    fn nearest_sample(timestamps: Vec<i64>, period: i64, t: i64) -> PyResult<(usize, i64)> {
        let stream = StreamIndex::new("stream", timestamps, period).map_err(err)?;
        core_nearest(&stream, t).map_err(err)
    }

    /// One synchronized RGB / thermal / LIDAR frame with labels.
    #[pyclass(name = "Frame", from_py_object)]
    #[derive(Clone)]
    struct Frame {
        inner: FrameBundle,
    }

    #[pymethods]
    impl Frame {
        /// Render a procedural scene.
        #[staticmethod]
        #[pyo3(signature = (index, seed=0, night=false, width=64, height=64, alpha=0.05, sigma=0.03))]
        fn synthesize(
            index: u64,
            seed: u64,
            night: bool,
            width: usize,
            height: usize,
            alpha: f64,
            sigma: f64,
        ) -> PyResult<Self> {
            let params = SyntheticSceneParams {
                width,
                height,
                night,
                alpha,
                sigma,
                seed,
                ..SyntheticSceneParams::default()
            };
            Ok(Frame {
                inner: synthesize_frame(&params, index).map_err(err)?,
            })
        }

        #[getter]
        fn width(&self) -> usize {
            self.inner.width()
        }

        #[getter]
        fn height(&self) -> usize {
            self.inner.height()
        }

        #[getter]
        fn timestamp(&self) -> i64 {
            self.inner.timestamp
        }

        #[getter]
        fn rgb(&self) -> Vec<Vec<Vec<f64>>> {
            image_to_lists(&self.inner.rgb)
        }

        #[getter]
        fn thermal(&self) -> Vec<Vec<f64>> {
            image_to_lists(&self.inner.thermal).remove(0)
        }

        #[getter]
        fn lidar(&self) -> Vec<Vec<f64>> {
            image_to_lists(&self.inner.lidar).remove(0)
        }

        #[getter]
        fn labels(&self) -> Vec<Vec<u8>> {
            labels_to_lists(&self.inner.labels)
        }

        /// Per-class pixel counts.
        fn histogram(&self) -> Vec<usize> {
            self.inner.labels.histogram().to_vec()
        }
    }

    /// Two-branch segmentation network with its optimizer state.
    #[pyclass(name = "Model")]
    struct Model {
        params: Params,
        optim: OptimState,
        train: TrainConfig,
    }

    #[pymethods]
    impl Model {
        #[new]
        #[pyo3(signature = (variant="dh", seed=0, width=64, height=64, stages=3, lr=1e-3))]
        fn new(variant: &str, seed: u64, width: usize, height: usize, stages: usize, lr: f64) -> PyResult<Self> {
            let variant: Variant = variant.parse().map_err(err)?;
            let channels = ModelConfig::default().channels.into_iter().take(stages).collect();
            let config = ModelConfig {
                stages,
                channels,
                width,
                height,
                multihead: variant.multihead(),
                ..ModelConfig::default()
            };
            let params = init_params(&config, seed).map_err(err)?;
            let mut train = TrainConfig {
                lr,
                seed,
                ..TrainConfig::default()
            };
            train.set_variant(variant);
            train.validate().map_err(err)?;
            Ok(Model {
                optim: OptimState::new(&params),
                params,
                train,
            })
        }

        /// Restore parameters from a checkpoint file.
        #[staticmethod]
        #[pyo3(signature = (path, variant="dh", lr=1e-3))]
        fn load(path: PathBuf, variant: &str, lr: f64) -> PyResult<Self> {
            let params = load_checkpoint(&path).map_err(err)?;
            let mut train = TrainConfig {
                lr,
                ..TrainConfig::default()
            };
            train.set_variant(variant.parse().map_err(err)?);
            if train.multihead != params.config.multihead {
                return Err(PyValueError::new_err("variant does not match the checkpoint's decoder heads"));
            }
            Ok(Model {
                optim: OptimState::new(&params),
                params,
                train,
            })
        }

        fn save(&self, path: PathBuf) -> PyResult<()> {
            save_checkpoint(&self.params, &path).map_err(err)
        }

        #[getter]
        fn variant(&self) -> &'static str {
            self.train.variant().name()
        }

        #[getter]
        fn num_parameters(&self) -> usize {
            self.params.num_scalars()
        }

        /// Switch between Adam (default) and plain SGD.
        fn use_sgd(&mut self, enabled: bool) {
            self.train.optimizer = if enabled { Optimizer::Sgd } else { Optimizer::Adam };
        }

        /// Joint-head logits `[class][row][col]` with the named modalities zeroed.
        #[pyo3(signature = (frame, mask=""))]
        fn logits(&self, frame: &Frame, mask: &str) -> PyResult<Vec<Vec<Vec<f64>>>> {
            let (preds, _) = forward(&self.params, &frame.inner, mask_of(mask)?).map_err(err)?;
            Ok(image_to_lists(&preds.joint))
        }

        /// Segmentation `[row][col]` with the named modalities zeroed, e.g. `"rgb"`.
        #[pyo3(signature = (frame, mask=""))]
        fn predict(&self, frame: &Frame, mask: &str) -> PyResult<Vec<Vec<u8>>> {
            let labels = predict(&self.params, &frame.inner, mask_of(mask)?).map_err(err)?;
            Ok(labels_to_lists(&labels))
        }

        /// Loss terms of the training objective on one frame.
        fn loss(&self, frame: &Frame) -> PyResult<BTreeMap<&'static str, f64>> {
            let b = frame_loss(&self.params, &frame.inner, self.train.double_pass, self.train.multihead).map_err(err)?;
            Ok(breakdown_dict(&b))
        }

        /// One optimizer update on a batch; returns the batch-mean loss terms.
        fn train_step(&mut self, frames: Vec<Frame>) -> PyResult<BTreeMap<&'static str, f64>> {
            let batch: Vec<&FrameBundle> = frames.iter().map(|f| &f.inner).collect();
            let b = train_step(&mut self.params, &mut self.optim, &batch, &self.train).map_err(err)?;
            Ok(breakdown_dict(&b))
        }

        /// Maximum relative error between analytic and central-difference
        /// gradients over `samples` parameters, at biases jittered by
        /// `bias_std`.
        #[pyo3(signature = (frame, eps=1e-5, samples=100, bias_std=0.1))]
        fn grad_check(&self, frame: &Frame, eps: f64, samples: usize, bias_std: f64) -> PyResult<f64> {
            let params = jitter_biases(&self.params, bias_std, self.train.seed);
            let report = grad_check(&params, &frame.inner, &frame.inner.labels, &self.train, eps, samples).map_err(err)?;
            Ok(report.max_rel_error)
        }

        /// Per-class IoU (None where undefined) and mIoU over `frames`.
        #[pyo3(signature = (frames, mask=""))]
        fn evaluate(&self, frames: Vec<Frame>, mask: &str) -> PyResult<(Vec<Option<f64>>, Option<f64>)> {
            let bundles: Vec<FrameBundle> = frames.into_iter().map(|f| f.inner).collect();
            let report = eval::evaluate(&self.params, &bundles, mask_of(mask)?).map_err(err)?;
            Ok((report.iou, report.miou))
        }

        /// mIoU for every non-empty subset of available modalities, keyed by
        /// subset name.
        fn ablation(&self, frames: Vec<Frame>) -> PyResult<Vec<(String, Option<f64>)>> {
            let bundles: Vec<FrameBundle> = frames.into_iter().map(|f| f.inner).collect();
            let mods: Vec<_> = ModalitySet::ALL.iter().collect();
            let report = eval::ablation_sweep(&self.params, &bundles, &mods).map_err(err)?;
            Ok(report.named().into_iter().map(|(name, r)| (name, r.miou)).collect())
        }
    }
}
