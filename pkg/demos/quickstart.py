"""Teacher, paraphraser, IE-FT student and analysis on a small blobs-img task.

Run: python3 demos/quickstart.py   (about a minute on one core)
"""

from iekd.analysis import analysis_report
from iekd.data import generate_synthetic
from iekd.nets import NetConfig, build_net
from iekd.train import DistillConfig, distill_iekd, train_codec, train_supervised, train_teacher

ds = generate_synthetic("blobs-img", seed=7, n_train=400, n_test=200)
cfg = DistillConfig(epochs=4, schedule=[[2, 0.1], [3, 0.1]], batch_size=32)

teacher = build_net(NetConfig(depth=2, channels=16, pool_after=(0,), seed=0), "teacher")
m = train_teacher(teacher, ds, cfg)
print(f"teacher test error {m.epochs[-1]['test_error']:.3f}")

codec, cm = train_codec(teacher, ds, epochs=8)
print(f"paraphraser L_rec {cm.analysis['initial_rec']:.3f} -> {cm.epochs[-1]['rec']:.3f}")

student_cfg = NetConfig(depth=2, channels=8, pool_after=(0,), seed=1)
ind = train_supervised(build_net(student_cfg, "student"), ds, cfg, "independent")
res = distill_iekd(teacher, codec, build_net(student_cfg, "student"), ds, cfg)
print(f"independent student {ind.epochs[-1]['test_error']:.3f}, IE-FT student {res.manifest.epochs[-1]['test_error']:.3f}")
for row in res.manifest.epochs:
    print(f"  epoch {row['epoch']}  goal {row['goal']:.3f}  inh {row['inh']:.4f}  exp {row['exp']:.4f}")

report, curve = analysis_report(res.student, res.split, ds.x_test, ds.y_test, [0.0, 0.01, 0.05], draws=4)
print(f"CKA(inheritance, exploration) {report['cka_inh_exp']:.3f}, active neurons {report['active_neurons']}")
for r in curve.rows():
    print(f"  sigma {r['sigma']:.2f}  loss {r['mean_loss']:.4f} +- {r['std_loss']:.4f}")
