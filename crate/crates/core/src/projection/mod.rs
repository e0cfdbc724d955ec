//! Multi-view pinhole projection of point clouds into depth images with exact
//! pixel-to-point correspondences.

mod bundle;
mod camera;
mod render;

pub use bundle::{
    decode_correspondences, decode_png, encode_correspondences, encode_png, read_bundle, read_meta, view_depth_name,
    view_png_name, write_bundle, BundleMeta, PoseRecord,
};
pub use camera::{
    generate_view_poses, inverse_map, project_point, CameraIntrinsics, Pose, Projection, DEFAULT_CAMERA_RADIUS,
    REFERENCE_FOCAL, REFERENCE_RESOLUTION,
};
pub use render::{
    count_interior_zero_pixels, count_zero_pixels, depth_to_intensity, downsample, intensity_to_image, pixel_index,
    render_view, render_views, Correspondence, CorrespondenceSet, ViewRender, EMPTY_OWNER,
};
