"""
Interfaz de línea de comandos de authority_lock.

Subcomandos:
  implant       implanta la puerta de autoridad y guarda el checkpoint
  attack        ataca un checkpoint (--mode adaptive|nc|pixel|finetune)
  certify       certificación por suavizado aleatorio (+ condición de robustez)
  report        une las métricas de varios directorios de ejecución
  ablate-sigma  barre sigma: implantación + ataque adaptativo por valor

Códigos de salida: 0 correcto, 2 configuración inválida, 3 checkpoint
incompatible o entradas ausentes, 4 fallo de entrenamiento o ataque,
5 error de E/S del dataset.
"""

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from config_local import Config

from .analysis import MetricsRecord, MICurveTracker, accuracy, export_features, project_2d, render_report
from .attack import (RecoveredTrigger, adaptive_attack, adaptive_attack_sweep, finetune_attack,
                     nc_sweep, pixel_sweep)
from .config import deep_merge, load_run_config
from .dataset import build_composite, load_cifar10, make_authorized_testset, synth_dataset
from .errors import (AttackFailureError, CheckpointMismatchError, ConfigError, DatasetIOError,
                     InvalidArgumentError, TrainingFailureError)
from .fingerprint import build_trigger_spec, derive_fingerprint
from .models import HardeningConfig, LockedClassifier, extract_features, fit_supervised, implant, train_log_rows
from .run_store import RunDirectory, load_metrics, load_snapshot
from .smoothing import base_noisy_accuracy, certify_dataset, robustness_summary, smoothed_accuracy
from .trigger import SoftTrigger, export_png

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISMATCH = 3
EXIT_FAILURE = 4
EXIT_DATASET = 5

FALLBACK_CERTIFY_SIGMA = 0.25
ATTACK_MODES = ("adaptive", "nc", "pixel", "finetune")


def setup_logging():
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        format=Config.LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )


@contextlib.contextmanager
def run_scope(run, **manifest_extra):
    """Registra el log del comando en el directorio y escribe el manifiesto al terminar"""
    handler = logging.FileHandler(run.path / f"{run.command}.log", encoding='utf-8')
    handler.setFormatter(logging.Formatter(Config.LOG_FORMAT))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield run
    except Exception as e:
        run.add_error(f"{type(e).__name__}: {e}")
        raise
    finally:
        run.finalize(**manifest_extra)
        root.removeHandler(handler)
        handler.close()


# --- Piezas comunes ---

def load_data(config):
    """(train, test) según la sección dataset de la configuración"""
    ds = config.dataset
    if ds.name == "cifar10":
        train, test = load_cifar10(ds.path)
    else:
        synth = ds.synth
        train, test = synth_dataset(synth.n, synth.num_classes, synth.image_shape,
                                    seed=synth.seed, noise=synth.noise, n_test=ds.test_subset_size)
    return train.subset(ds.subset_size, config.implant.seed), test.subset(ds.test_subset_size, config.implant.seed)


def build_spec(config, image_shape):
    trig = config.trigger
    fp = derive_fingerprint(trig.device_id, trig.challenge)
    spec = build_trigger_spec(fp, channels=image_shape[0], patch_h=trig.patch_h,
                              patch_w=trig.patch_w, location=trig.location)
    spec.check_fits(image_shape)
    return spec


def load_checkpoint(config, checkpoint, data):
    path = Path(checkpoint)
    if not path.exists():
        raise CheckpointMismatchError(f"Checkpoint no encontrado: {path}")
    model = LockedClassifier.load(path, device=config.device)
    if model.arch_id != config.arch_id:
        raise CheckpointMismatchError(
            f"El checkpoint es '{model.arch_id}' y la configuración pide '{config.arch_id}'"
        )
    if model.num_classes != data.num_classes or model.input_shape != data.image_shape:
        raise CheckpointMismatchError(
            f"El checkpoint espera K={model.num_classes}, entrada {model.input_shape}; "
            f"el dataset tiene K={data.num_classes}, entrada {data.image_shape}"
        )
    return model


def _check_trigger_digest(model, spec):
    if model.trigger_digest != spec.fingerprint_digest:
        logging.warning("La huella del trigger configurado no coincide con la del checkpoint")


def train_locked(config, train, test, spec, sigma, tracker=None):
    """Implantación (con endurecimiento opcional) a partir de la configuración"""
    imp = config.implant
    comp = build_composite(train, spec, imp.seed, auth_fraction=imp.auth_fraction,
                           num_classes=train.num_classes, origin=config.dataset.name,
                           resample_each_epoch=imp.resample_each_epoch)
    model = LockedClassifier.create(config.arch_id, train.num_classes, train.image_shape, seed=imp.seed,
                                    device=config.device, trigger_digest=spec.fingerprint_digest)
    hardening = None
    if imp.harden.enabled:
        hardening = HardeningConfig(clean=train.subset(imp.harden.clean_size, imp.seed + 2),
                                    steps_per_epoch=imp.harden.steps_per_epoch,
                                    loss_ceiling=imp.harden.loss_ceiling, lr=imp.harden.lr,
                                    batch_size=imp.batch_size, inner_lr=imp.harden.inner_lr,
                                    inner_steps=imp.harden.inner_steps)
    return implant(model, comp, lambda_rand=imp.lambda_rand, epochs=imp.epochs, lr=imp.lr, sigma=sigma,
                   seed=imp.seed, batch_size=imp.batch_size, eval_auth=make_authorized_testset(test, spec),
                   eval_clean=test, hardening=hardening, epoch_callback=tracker)


def attack_split(test, att):
    """(datos de optimización, evaluación disjunta) para los ataques

    Con data_size menor que el conjunto de prueba, el ataque optimiza sobre
    data_size imágenes y las métricas se miden sobre el resto. Si no queda
    resto, la fracción eval_fraction se aparta para la evaluación.
    """
    if att.data_size >= len(test):
        eval_set, opt_set = test.split(att.eval_fraction, att.seed)
    else:
        order = np.random.default_rng(att.seed).permutation(len(test))
        opt_set, eval_set = test.take(np.sort(order[:att.data_size])), test.take(np.sort(order[att.data_size:]))
    if len(opt_set) == 0 or len(eval_set) == 0:
        raise InvalidArgumentError(f"El conjunto de prueba ({len(test)} imágenes) no admite la partición del ataque")
    return opt_set, eval_set


def _metrics(config, model, test, spec, sigma, **extra):
    return MetricsRecord(
        model_id=config.arch_id,
        dataset_id=config.dataset.name,
        sigma=float(sigma),
        seed=config.implant.seed,
        acc_auth=accuracy(model, test, spec),
        acc_clean=accuracy(model, test),
        **extra,
    )


def _export_trigger(run, trigger, stem):
    trigger.save(run.path, stem)
    export_png(trigger.soft.mask, run.file(f"{stem}_mask.png"))
    export_png(trigger.soft.pattern, run.file(f"{stem}_pattern.png"))


def _export_feature_views(run, model, tracker):
    """Features penúltimas (limpias y autorizadas) del conjunto de sondeo y su proyección PCA"""
    labels = tracker.probe_set.labels
    for name, images in (("clean", tracker.probe_set.images), ("auth", tracker.auth_set.images)):
        features = extract_features(model, images, tap=tracker.tap)
        export_features(features, labels, run.path, stem=f"features_{name}")
        try:
            points = project_2d(features, "pca")
        except InvalidArgumentError as e:
            logging.warning(f"Proyección 2-D de las features '{name}' omitida: {e}")
            continue
        run.write_csv(f"projection_{name}.csv",
                      [{'x': float(p[0]), 'y': float(p[1]), 'label': int(y)} for p, y in zip(points, labels)])


# --- Comandos ---

def cmd_implant(config):
    run = RunDirectory(config.output_dir, "implant")
    result = {'success': False, 'run_dir': str(run.path)}
    with run_scope(run):
        run.write_snapshot(config)
        train, test = load_data(config)
        spec = build_spec(config, train.image_shape)
        spec.save(run.file("trigger_spec.json"))
        export_png(spec.pattern.values, run.file("trigger.png"))

        imp = config.implant
        tracker = None
        if imp.track_mi:
            tracker = MICurveTracker(test.subset(imp.mi_probe_size, imp.seed), spec, seed=imp.seed)
        locked = train_locked(config, train, test, spec, imp.sigma, tracker)

        acc_baseline = None
        if imp.train_baseline:
            baseline = LockedClassifier.create(config.arch_id, train.num_classes, train.image_shape,
                                               seed=imp.seed, device=config.device)
            baseline = fit_supervised(baseline, train, epochs=imp.epochs, lr=imp.lr, seed=imp.seed,
                                      batch_size=imp.batch_size,
                                      epoch_callback=tracker.baseline_callback if tracker else None)
            acc_baseline = accuracy(baseline, test)

        manifest_path = locked.save(run.path)
        run.write_csv("train_log.csv", train_log_rows(locked))
        record = _metrics(config, locked, test, spec, imp.sigma, acc_baseline=acc_baseline)
        run.write_metrics([record])
        if tracker is not None and tracker.values:
            curve = tracker.curve()
            run.write_csv("mi_curve.csv", curve.rows())
            result.update(auc_auth=curve.auc_auth, auc_clean=curve.auc_clean)
        if tracker is not None:
            _export_feature_views(run, locked, tracker)

        logging.info(f"Implantación completada: acc_auth {record.acc_auth:.4f}, acc_clean {record.acc_clean:.4f}")
        result.update(success=True, checkpoint=str(manifest_path), metrics=record.to_row())
    return result


def cmd_attack(config, checkpoint, mode):
    if mode not in ATTACK_MODES:
        raise InvalidArgumentError(f"Modo de ataque desconocido: {mode} (disponibles: {ATTACK_MODES})")
    run = RunDirectory(config.output_dir, f"attack_{mode}")
    result = {'success': False, 'run_dir': str(run.path), 'mode': mode}
    with run_scope(run, checkpoint=str(checkpoint)):
        run.write_snapshot(config)
        train, test = load_data(config)
        model = load_checkpoint(config, checkpoint, train)
        spec = build_spec(config, train.image_shape)
        _check_trigger_digest(model, spec)
        att = config.attack
        common = dict(seed=att.seed, batch_size=att.batch_size)
        if mode != "finetune":
            data, held_out = attack_split(test, att)
            common['eval_data'] = held_out

        # acc_reversed viene del propio ataque, medido sobre held_out
        if mode == "adaptive":
            if att.sweep_lambdas:
                trigger = adaptive_attack_sweep(model, data, steps=att.steps, lr=att.lr, **common)
            else:
                trigger = adaptive_attack(model, data, lambda_reg=att.lambda_reg, steps=att.steps, lr=att.lr, **common)
            _export_trigger(run, trigger, "adaptive_trigger")
            record = _metrics(config, model, held_out, spec, model.train_sigma,
                              acc_reversed=trigger.acc_reversed, attack=mode)
        elif mode == "nc":
            triggers, report = nc_sweep(model, data, lambda_reg=att.lambda_reg, steps=att.steps, lr=att.lr, **common)
            for trigger in triggers:
                _export_trigger(run, trigger, f"nc_class_{trigger.target_class}")
            report.save(run.file("anomaly_report.json"))
            record = _metrics(config, model, held_out, spec, model.train_sigma,
                              acc_reversed=max(t.acc_reversed for t in triggers), attack=mode)
            result['anomaly'] = report.to_dict()
        elif mode == "pixel":
            triggers = pixel_sweep(model, data, l1_weight=att.pixel_l1_weight, steps=att.steps, lr=att.pixel_lr,
                                   **common)
            for trigger in triggers:
                _export_trigger(run, trigger, f"pixel_class_{trigger.target_class}")
            record = _metrics(config, model, held_out, spec, model.train_sigma,
                              acc_reversed=max(t.acc_reversed for t in triggers), attack=mode)
        else:
            samples = train.subset(att.finetune_samples, att.seed)
            tuned, delta_clean, delta_auth = finetune_attack(
                model, samples, eval_clean=test, eval_auth=make_authorized_testset(test, spec),
                epochs=att.finetune_epochs, lr=att.finetune_lr, seed=att.seed,
            )
            run.write_json("finetune.json", {'samples': len(samples), 'epochs': att.finetune_epochs,
                                             'delta_clean': delta_clean, 'delta_auth': delta_auth})
            tuned_dir = run.path / "finetuned"
            tuned_dir.mkdir()
            tuned.save(tuned_dir)
            record = _metrics(config, tuned, test, spec, model.train_sigma, attack=mode)
            result.update(delta_clean=delta_clean, delta_auth=delta_auth)

        run.write_metrics([record])
        result.update(success=True, metrics=record.to_row())
    return result


def _certify_sigma(config, model):
    requested = config.certify.sigma
    if model.train_sigma == 0:
        sigma = requested or FALLBACK_CERTIFY_SIGMA
        logging.warning(
            f"El checkpoint se entrenó con sigma = 0: la certificación con sigma={sigma} no es significativa"
        )
        return sigma
    if requested is not None and requested != model.train_sigma:
        if config.certify.allow_sigma_override:
            logging.warning(f"Certificando con sigma={requested} (entrenado con {model.train_sigma})")
            return requested
        raise ConfigError(
            f"difiere del sigma de entrenamiento del checkpoint ({model.train_sigma})", field="certify.sigma"
        )
    return model.train_sigma


def _load_trigger_file(trigger_file):
    path = Path(trigger_file)
    if not path.exists():
        raise CheckpointMismatchError(f"Archivo de trigger no encontrado: {path}")
    if path.name.endswith("_summary.json"):
        return RecoveredTrigger.load(path)
    return SoftTrigger.load(path)


def cmd_certify(config, checkpoint, trigger_file=None):
    run = RunDirectory(config.output_dir, "certify")
    result = {'success': False, 'run_dir': str(run.path)}
    with run_scope(run, checkpoint=str(checkpoint)):
        run.write_snapshot(config)
        train, test = load_data(config)
        model = load_checkpoint(config, checkpoint, train)
        spec = build_spec(config, train.image_shape)
        _check_trigger_digest(model, spec)
        cert = config.certify
        sigma = _certify_sigma(config, model)

        inputs = test.subset(cert.num_inputs, cert.seed)
        if cert.inputs == "authorized":
            inputs = make_authorized_testset(inputs, spec)
        records = certify_dataset(model, inputs.images, sigma, cert.n0, cert.n, cert.alpha, seed=cert.seed)
        run.write_csv("certification.csv", [r.to_row() for r in records])

        authorized = make_authorized_testset(inputs, spec) if cert.inputs == "clean" else inputs
        clean = inputs if cert.inputs == "clean" else test.subset(cert.num_inputs, cert.seed)
        summary = {
            'sigma': sigma,
            'inputs': cert.inputs,
            'base_noisy': {
                'acc_auth': base_noisy_accuracy(model, authorized.images, authorized.labels, sigma, cert.seed),
                'acc_clean': base_noisy_accuracy(model, clean.images, clean.labels, sigma, cert.seed),
            },
            'smoothed': {
                'acc_auth': smoothed_accuracy(model, authorized.images, authorized.labels, sigma,
                                              cert.n0, cert.alpha, cert.seed),
                'acc_clean': smoothed_accuracy(model, clean.images, clean.labels, sigma,
                                               cert.n0, cert.alpha, cert.seed),
            },
            'abstain_rate': float(np.mean([r.abstained for r in records])),
            'mean_radius': float(np.mean([r.radius for r in records])),
        }
        if trigger_file is not None:
            summary['robustness'] = robustness_summary(records, inputs.images, _load_trigger_file(trigger_file))
            run.write_json("robustness.json", summary['robustness'])
            logging.info(f"Fracción dentro del radio certificado: {summary['robustness']['fraction_inside_radius']:.4f}")
        run.write_json("certify_summary.json", summary)
        result.update(success=True, records=len(records), summary=summary)
    return result


def cmd_report(run_dirs, output_dir=None):
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise InvalidArgumentError("report necesita al menos un directorio de ejecución")
    missing = [str(d) for d in run_dirs if not d.is_dir()]
    if missing:
        raise CheckpointMismatchError(f"Directorios de ejecución inexistentes: {missing}")
    records = [record for d in run_dirs for record in load_metrics(d)]
    run = RunDirectory(output_dir or Config.OUTPUT_DIR, "report")
    with run_scope(run, sources=[str(d) for d in run_dirs]):
        markdown = render_report(records, "markdown")
        run.write_text("report.md", markdown)
        run.write_text("report.csv", render_report(records, "csv"))
        logging.info(f"Informe generado con {len(records)} registros de {len(run_dirs)} ejecuciones")
    return {'success': True, 'run_dir': str(run.path), 'report': markdown}


def calibrated_sigma(rows, gain_tolerance, min_acc_auth):
    """Menor sigma con |gain_att| <= tolerancia y acc_auth >= mínimo (None si no hay)"""
    for row in sorted(rows, key=lambda r: r['sigma']):
        if abs(row['gain_att']) <= gain_tolerance and row['acc_auth'] >= min_acc_auth:
            return row['sigma']
    return None


def cmd_ablate_sigma(config, sigmas=None):
    sigmas = sorted(set(sigmas)) if sigmas else config.ablate.sigmas
    if any(s < 0 for s in sigmas):
        raise ConfigError("los valores de sigma deben ser no negativos", field="ablate.sigmas")
    run = RunDirectory(config.output_dir, "ablate_sigma")
    result = {'success': False, 'run_dir': str(run.path)}
    with run_scope(run):
        run.write_snapshot(config)
        train, test = load_data(config)
        spec = build_spec(config, train.image_shape)
        att = config.attack
        data, held_out = attack_split(test, att)

        rows, records = [], []
        for sigma in sigmas:
            logging.info(f"Ablación: sigma = {sigma}")
            locked = train_locked(config, train, test, spec, sigma)
            sigma_dir = run.path / f"sigma_{sigma:g}"
            sigma_dir.mkdir()
            locked.save(sigma_dir)
            trigger = adaptive_attack(locked, data, lambda_reg=att.lambda_reg, steps=att.steps, lr=att.lr,
                                      seed=att.seed, batch_size=att.batch_size, eval_data=held_out)
            record = _metrics(config, locked, held_out, spec, sigma, acc_reversed=trigger.acc_reversed,
                              attack="adaptive")
            records.append(record)
            rows.append({'sigma': sigma, 'acc_auth': record.acc_auth, 'acc_clean': record.acc_clean,
                         'acc_reversed': record.acc_reversed, 'gain_att': record.gain_att})

        run.write_csv("ablation.csv", rows)
        run.write_metrics(records)
        best = calibrated_sigma(rows, config.ablate.gain_tolerance, config.ablate.min_acc_auth)
        run.write_json("ablation.json", {'rows': rows, 'calibrated_sigma': best,
                                         'gain_tolerance': config.ablate.gain_tolerance,
                                         'min_acc_auth': config.ablate.min_acc_auth})
        if best is None:
            logging.warning("Ningún sigma del barrido cumple el criterio de calibración")
        else:
            logging.info(f"Sigma calibrado: {best}")
        result.update(success=True, rows=rows, calibrated_sigma=best)
    return result


# --- Entrada ---

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="archivo JSON de configuración o directorio de una ejecución previa")
    common.add_argument("--profile", choices=("desk", "paper"), help="escala del experimento")
    common.add_argument("--output-dir", help="raíz de los directorios de ejecución")
    common.add_argument("--device", help="auto, cpu, cuda...")

    parser = argparse.ArgumentParser(prog="authlock", description="Puerta de autoridad para clasificadores")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("implant", parents=[common], help="implanta la puerta de autoridad")

    attack = sub.add_parser("attack", parents=[common], help="ataca un checkpoint")
    attack.add_argument("--checkpoint", required=True)
    attack.add_argument("--mode", choices=ATTACK_MODES, default="adaptive")

    certify = sub.add_parser("certify", parents=[common], help="certificación por suavizado")
    certify.add_argument("--checkpoint", required=True)
    certify.add_argument("--trigger", help="trigger recuperado (*_summary.json o manifiesto de SoftTrigger)")

    report = sub.add_parser("report", parents=[common], help="informe de varias ejecuciones")
    report.add_argument("run_dirs", nargs="*")

    ablate = sub.add_parser("ablate-sigma", parents=[common], help="barrido de sigma")
    ablate.add_argument("--sigmas", type=float, nargs="+")
    return parser


def _overrides(args):
    overrides = {}
    if args.output_dir:
        overrides['output_dir'] = args.output_dir
    if args.device:
        overrides['device'] = args.device
    return overrides


def resolve_config(args):
    """Configuración desde un JSON o, si --config es un directorio de ejecución, desde su snapshot"""
    if args.config and Path(args.config).is_dir():
        snapshot = load_snapshot(args.config)
        logging.info(f"Repitiendo la configuración de {args.config}")
        return load_run_config(profile=args.profile or snapshot.get('profile'),
                               overrides=deep_merge(snapshot, _overrides(args)))
    return load_run_config(args.config, profile=args.profile, overrides=_overrides(args))


def run_command(args):
    if args.command == "report":
        return cmd_report(args.run_dirs, args.output_dir)
    config = resolve_config(args)
    if args.command == "implant":
        return cmd_implant(config)
    if args.command == "attack":
        return cmd_attack(config, args.checkpoint, args.mode)
    if args.command == "certify":
        return cmd_certify(config, args.checkpoint, args.trigger)
    return cmd_ablate_sigma(config, args.sigmas)


def main(argv=None):
    """Función principal; devuelve el código de salida"""
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        result = run_command(args)
    except ConfigError as e:
        logging.error(f"Error de configuración: {e}")
        return EXIT_CONFIG
    except DatasetIOError as e:
        logging.error(f"Error leyendo el dataset: {e}")
        return EXIT_DATASET
    except (CheckpointMismatchError, InvalidArgumentError, FileNotFoundError) as e:
        logging.error(f"Error en las entradas: {e}")
        return EXIT_MISMATCH
    except (TrainingFailureError, AttackFailureError) as e:
        logging.error(f"Error durante el cómputo: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logging.error(f"Error inesperado en '{args.command}': {type(e).__name__}: {e}")
        return EXIT_FAILURE
    logging.info(f"Comando '{args.command}' terminado: {result.get('run_dir')}")
    return EXIT_OK if result.get('success') else EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
