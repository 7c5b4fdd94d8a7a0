//! Refine retargeted hand demonstrations with a pre-trained diffusion policy.
//!
//! The pipeline turns a synthetic "human hand" keypoint demonstration into an
//! approximate robot trajectory via kinematic retargeting, then improves it
//! closed-loop by partially noising the retargeted action chunks and denoising
//! them with a diffusion policy trained on scripted robot data. The crate is
//! self-contained: it ships its own tabletop micro-simulator, MLP denoiser
//! with exact reverse-mode gradients, demonstration generators, and a
//! benchmark harness that reproduces the retarget / base-policy / refined
//! success ordering.
//!
//! Module map:
//! - [`diffmath`] — noise schedules, forward noising, DDPM/DDIM reverse steps
//! - [`tinynet`] — MLP, backprop, Adam, sinusoidal step embeddings
//! - [`simenv`] — deterministic tabletop simulator, tasks, planar-arm IK
//! - [`demonstrator`] — scripted robot experts and hand-keypoint demos
//! - [`retarget`] — keypoints -> effector pose + gripper, open-loop replay
//! - [`policy`] — chunked-action diffusion policy (training and sampling)
//! - [`refine`] — partial noising/denoising of retargeted chunks, episodes
//! - [`harness`] — benchmark configuration, sweeps, ablations, CSV output

pub mod demonstrator;
pub mod diffmath;
pub mod geom;
pub mod harness;
pub mod policy;
pub mod refine;
pub mod retarget;
pub mod seeds;
pub mod simenv;
pub mod tinynet;
