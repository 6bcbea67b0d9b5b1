"""Independent reference computations shared by the unit and acceptance suites."""
import numpy as np
from scipy.spatial.transform import Rotation

from vasplat.gaussians import GaussianCloud, logit
from vasplat.geometry import make_camera, project
from vasplat.rasterizer import RenderSettings, render

from conftest import random_camera


def reproject_through_plane(ref, src, n, d, pix):
    """Backproject ``pix`` onto the ref-frame plane n.x = d, then project into ``src``."""
    ray = ref.K_inv @ np.array([pix[0], pix[1], 1.0])
    x_r = ray * (d / (n @ ray))
    return project(ref.pose.to_world(x_r), src)[0]


def homography_fuzz(n_cases, seed=0):
    """Worst pixel disagreement between warp_pixel(H) and the depth-reprojection path."""
    from vasplat.geometry import Camera, CameraPose, homography, warp_pixel
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_cases:
        ref = random_camera(rng)
        src_R = ref.pose.R_wc @ Rotation.from_rotvec(rng.normal(0, 0.2, 3)).as_matrix()
        src = Camera(ref.intrinsics, CameraPose(src_R, ref.pose.t_c + rng.normal(0, 0.5, 3)), 1)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        d = rng.uniform(1, 10)
        pix = rng.uniform(0, [ref.width, ref.height])
        ray = ref.K_inv @ np.array([pix[0], pix[1], 1.0])
        den = n @ ray
        if den <= 0.05:
            continue
        x_r = ray * d / den
        if x_r[2] > 100 or src.pose.to_camera(ref.pose.to_world(x_r))[2] < 0.1:
            continue
        H = homography(ref, src, n, d)
        err = np.abs(warp_pixel(H, pix) - reproject_through_plane(ref, src, n, d, pix))
        worst = max(worst, float(err.max()))
        done += 1
    return worst


def roundtrip_fuzz(n_cases, seed=0):
    from vasplat.geometry import backproject
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        cam = random_camera(rng)
        pix = rng.uniform(0, [cam.width, cam.height])
        z = rng.uniform(0.1, 50)
        p2, z2 = project(cam.pose.to_world(backproject(pix, z, cam)), cam)
        worst = max(worst, float(np.max(np.abs(p2 - pix))), abs(z2 - z) / z)
    return worst


def plane_equation_fuzz(n_cases, seed=0):
    from vasplat.gaussians import plane_depth
    from vasplat.geometry import backproject
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_cases:
        cam = random_camera(rng)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        pix = rng.uniform(0, [cam.width, cam.height])
        nc = cam.pose.R_wc.T @ n
        den = nc @ (cam.K_inv @ [pix[0], pix[1], 1.0])
        if abs(den) < 0.05:
            continue
        d = np.sign(den) * rng.uniform(0.5, 5)
        z = plane_depth(n, d, pix, cam)
        worst = max(worst, abs(float(nc @ backproject(pix, z, cam)) - d) / max(1.0, z))
        done += 1
    return worst


def random_cloud(rng, P, spread=0.8, depth=4.0, sh_degree=0):
    from vasplat.gaussians import n_sh_rest
    pos = np.c_[rng.uniform(-spread, spread, (P, 2)), depth + rng.normal(0, 0.5, P)]
    q = rng.normal(size=(P, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ls = np.log(rng.uniform(0.02, 0.3, (P, 3)))
    return GaussianCloud(pos, q, ls, logit(rng.uniform(0.05, 0.99, P)), rng.uniform(0, 1, (P, 3)),
                         rng.normal(0, 0.1, (P, n_sh_rest(sh_degree), 3)), sh_degree)


def fuzz_view(rng, res=48):
    f = rng.uniform(0.8, 1.5) * res
    return make_camera(f, f, (res - 1) / 2 + rng.uniform(-3, 3), (res - 1) / 2 + rng.uniform(-3, 3), res, res)


def blending_invariants(n_scenes=20, seed=0):
    """(worst |alpha + T - 1|, storage-order invariant, tile invariant) over fuzzed scenes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    order_ok = tile_ok = True
    fields = ("color", "accumulated_alpha", "blended_normal", "blended_distance", "plane_depth",
              "blended_gaussian_depth", "final_T")
    for _ in range(n_scenes):
        cloud = random_cloud(rng, int(rng.integers(1, 60)), sh_degree=int(rng.integers(0, 3)))
        cam = fuzz_view(rng)
        base = render(cloud, cam, RenderSettings(tile_size=8), records=False)
        worst = max(worst, float(np.max(np.abs(base.accumulated_alpha + base.final_T - 1.0))))
        perm = render(cloud.permuted(rng.permutation(len(cloud))), cam, RenderSettings(tile_size=8), records=False)
        one = render(cloud, cam, RenderSettings(tile_size=max(cam.width, cam.height)), records=False)
        odd = render(cloud, cam, RenderSettings(tile_size=5), records=False)
        for f in fields:
            order_ok &= np.array_equal(getattr(base, f), getattr(perm, f))
            tile_ok &= np.array_equal(getattr(base, f), getattr(one, f)) and np.array_equal(getattr(base, f),
                                                                                           getattr(odd, f))
    return worst, bool(order_ok), bool(tile_ok)


def sphere_fusion_rms(root, n_views=16, res=128, voxel=0.02, truncation=0.08, seed=7):
    """RMS distance to the unit sphere of the mesh fused from ray-traced GT depths."""
    from vasplat.fusion import fuse_depths, marching_cubes
    from vasplat.scenes import generate_scene
    ds = generate_scene("sphere", "checker", n_views, res, seed, root)
    depths = [ds.gt_depth(i) for i in range(len(ds))]
    valids = [np.isfinite(d) & (d > 0) for d in depths]
    depths = [np.where(m, d, 0.0) for d, m in zip(depths, valids)]
    mesh = marching_cubes(fuse_depths(depths, valids, ds.cameras, voxel, truncation, ds.bbox))
    r = np.linalg.norm(mesh.vertices, axis=1)
    return float(np.sqrt(np.mean((r - 1.0) ** 2))), mesh


def nn_exactness_fuzz(n_cases=100, max_points=500, seed=0):
    """Number of fuzzed instances where the accelerated NN differs from brute force at all."""
    from vasplat.metrics import nn_distances, nn_distances_brute
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_cases):
        a = rng.normal(size=(rng.integers(1, max_points + 1), 3))
        b = rng.normal(size=(rng.integers(1, max_points + 1), 3))
        if rng.random() < 0.3:
            # clustered and duplicated points stress ties
            b = np.round(b, 1)
            a = np.concatenate([a, b[: len(b) // 3]])[:max_points]
        if not np.array_equal(nn_distances(a, b), nn_distances_brute(a, b)):
            bad += 1
    return bad
