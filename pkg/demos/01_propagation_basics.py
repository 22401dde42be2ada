"""
Reference channel on a hand-built street
========================================

Start from free space, put a building in the way, then look at the
multipath seen by the voxel ray launcher.
"""
from chanform import env, oracle

F = 5.9e9

# free space: a 100 m link at 5.9 GHz
print("FSPL(100 m) = %.2f dB" % oracle.fspl_db(100.0, F))
print("knife edge at grazing, J(0) = %.2f dB" % oracle.knife_edge_j(0.0))

# a 20 m tall block between a 10 m mast and a street-level receiver
wall = env.Building(((90, 60), (110, 60), (110, 140), (90, 140)), 20.0, "concrete")
scene = env.Scenario(bounds=(0, 0, 200, 200), buildings=(wall,),
                     tx_sites=(env.TxSite((20.0, 100.0, 10.0), F),))
raster = env.rasterize(scene, 1.0)
link = oracle.Link((20.0, 100.0, 10.0), (180.0, 100.0, 1.5), F)

los, edges = oracle.los_test(raster, link)
sample = oracle.path_loss(raster, link)
print("\nblocked link: LOS=%s, %d edge(s), PL = %.1f dB (free space %.1f dB)"
      % (los, len(edges), sample.path_loss, oracle.fspl_db(link.distance, F)))

# sweep the receiver along the street behind the building
print("\nreceiver x   path loss   excess over free space")
for x in (120, 140, 160, 180, 195):
    lk = oracle.Link(link.tx, (float(x), 100.0, 1.5), F)
    s = oracle.path_loss(raster, lk)
    print("%10.0f %11.1f %12.1f" % (x, s.path_loss, s.path_loss - oracle.fspl_db(lk.distance, F)))

# multipath off a metal wall beside an open link
mirror = env.Scenario(bounds=(0, 0, 100, 100),
                      buildings=(env.Building(((60, 0), (70, 0), (70, 100), (60, 100)), 30.0, "metal"),),
                      tx_sites=(env.TxSite((20.0, 30.0, 5.0), F),))
vox = env.voxelize(mirror, 1.0)
paths = oracle.ray_launch(vox, oracle.Link((20.0, 30.0, 5.0), (30.0, 70.0, 1.5), F),
                          oracle.RayConfig(n_azimuth=360, n_elevation=90))
print("\npaths found by ray launching:")
for p in paths:
    print("  %d bounce(s): delay %.1f ns, gain %.1f dB" % (p.interaction_count, p.delay * 1e9, p.power_gain))
ms = oracle.multipath_sample(paths, F)
print("RMS delay spread %.1f ns, effective path count %d" % (ms.rms_delay_spread * 1e9, ms.effective_path_count))
