//! Shared fixtures for the criterion benchmarks in `benches/`.

use panoptic_core::postprocess::{extract_centers, group_pixels, keypoint_nms, thing_mask_from_semantic};
use panoptic_core::synth::{bench_inputs, BenchInputs};
use panoptic_core::{BoolGrid, DatasetSpec, Dims, InstanceCenter, LabelMap, PostprocParams};

/// Synthetic inputs plus the intermediate results each stage consumes.
pub struct Fixture {
    pub spec: DatasetSpec,
    pub params: PostprocParams,
    pub inputs: BenchInputs,
    pub centers: Vec<InstanceCenter>,
    pub thing_mask: BoolGrid,
    pub instance_ids: LabelMap,
}

impl Fixture {
    pub fn new(height: usize, width: usize, n_centers: usize) -> Self {
        let spec = DatasetSpec::cityscapes();
        let params = PostprocParams::default();
        let dims = Dims::new(height, width).expect("non-empty dims");
        let inputs = bench_inputs(dims, n_centers, 7, &spec);
        let nms = keypoint_nms(&inputs.heatmap, params.nms_kernel).expect("odd kernel");
        let centers = extract_centers(&nms, params.center_threshold, params.top_k);
        let thing_mask = thing_mask_from_semantic(&inputs.semantic, &spec);
        let instance_ids = group_pixels(&centers, &inputs.offsets, &thing_mask).expect("matching dims");
        Fixture {
            spec,
            params,
            inputs,
            centers,
            thing_mask,
            instance_ids,
        }
    }
}
